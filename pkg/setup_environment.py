"""
Environment setup, runtime variables and logging for the FuseSR toolkit
"""
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

# Add python-dotenv support if available
try:
    from dotenv import load_dotenv
    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False


ENV_VARIABLES = {
    'FUSESR_THREADS': 'Upper bound on worker threads (LUT precompute, conv row blocks, eval)',
    'FUSESR_HOME': 'Directory holding config.json and the LUT cache (default ~/.fusesr)',
    'FUSESR_LOG_LEVEL': 'Log level for stderr logs (DEBUG, INFO, WARNING, ERROR)',
}

stderr_console = Console(stderr=True)


@dataclass
class RuntimeSettings:
    """Process-wide runtime settings read from the environment"""
    threads: int = 1
    home: Optional[str] = None
    log_level: str = "INFO"


class EnvironmentSetup:
    """Loads .env files and reports on the runtime environment"""

    def __init__(self, env_file: Optional[Path] = None):
        self.env_file = Path(env_file) if env_file else Path.cwd() / '.env'
        self.example_file = Path(__file__).parent / '.env.example'

        # Load environment variables if dotenv is available
        if DOTENV_AVAILABLE and self.env_file.exists():
            load_dotenv(self.env_file, override=False)

    def check_required_packages(self) -> Dict[str, bool]:
        """Check if required Python packages are importable"""
        packages = {
            'numpy': False,
            'pandas': False,
            'click': False,
            'rich': False,
            'dotenv': DOTENV_AVAILABLE,
        }
        for package in packages:
            if package == 'dotenv':
                continue  # Already checked
            try:
                __import__(package)
                packages[package] = True
            except ImportError:
                packages[package] = False
        return packages

    def runtime_settings(self) -> RuntimeSettings:
        """Read FUSESR_* variables"""
        raw_threads = os.getenv('FUSESR_THREADS', '1')
        try:
            threads = max(1, int(raw_threads))
        except ValueError:
            threads = 1
            logging.getLogger(__name__).warning("ignoring non-integer FUSESR_THREADS=%r", raw_threads)

        return RuntimeSettings(
            threads=threads,
            home=os.getenv('FUSESR_HOME') or None,
            log_level=os.getenv('FUSESR_LOG_LEVEL', 'INFO').upper(),
        )

    def status_table(self) -> Table:
        """Rich table of package and variable status"""
        table = Table(title="FuseSR environment", show_header=True, header_style="bold cyan")
        table.add_column("Item")
        table.add_column("Status")
        table.add_column("Notes", style="dim")

        for package, ok in self.check_required_packages().items():
            table.add_row(package, "[green]ok[/green]" if ok else "[red]missing[/red]", "python package")

        for name, purpose in ENV_VARIABLES.items():
            value = os.getenv(name)
            table.add_row(name, value if value else "[dim]unset[/dim]", purpose)

        table.add_row(".env", "found" if self.env_file.exists() else "[dim]absent[/dim]", str(self.env_file))
        return table


_environment: Optional[EnvironmentSetup] = None


def get_environment() -> EnvironmentSetup:
    """Lazily created process environment"""
    global _environment
    if _environment is None:
        _environment = EnvironmentSetup()
    return _environment


def runtime_settings() -> RuntimeSettings:
    """Current runtime settings"""
    return get_environment().runtime_settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Route all package logs to stderr through rich"""
    if level is None:
        level = runtime_settings().log_level

    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)

    handler = RichHandler(console=stderr_console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields) -> None:
    """Emit an `event key=value ...` record"""
    if not logger.isEnabledFor(level):
        return
    parts = [event]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    logger.log(level, " ".join(parts))


if __name__ == "__main__":
    env = get_environment()
    Console().print(env.status_table())
    print(env.runtime_settings())
    sys.exit(0)
