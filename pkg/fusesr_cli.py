"""
FuseSR command line: LUT precompute, dataset generation, training,
inference, evaluation, benchmarking and gradient checks.

Results go to stdout (rich tables) or files; logs go to stderr.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""
import functools
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import click
import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table
from rich.text import Text

from brdf_lut import EnvBrdfLut, load_lut, precompute_lut, save_lut
from cache_manager import cache_manager
from config import DatasetSettings, FuseSRConfig, HNetConfig, config_manager, merge_section
from errors import FuseSRError, SchemaError, TrendError
from evaluator import (
    ABLATION_NAMES, EvalReport, ablation_configs, ablation_study, bench, default_bench_configs, evaluate,
)
from frame_io import frame_dir_name, read_bundle, write_pfm
from gradcheck import GradCheckReport, layer_suite, model_suite
from hnet_model import HNetModel, load_model, save_model, super_resolve
from setup_environment import configure_logging, get_environment, runtime_settings, stderr_console
from synth_dataset import (
    SEQUENCE_FILE, build_dataset, generate_sequence, load_sequence, read_sequence_meta,
)
from trainer import TrainRun, moving_average, resume_run, train

logger = logging.getLogger(__name__)


class FuseSRConsole:
    """Rich rendering of command results"""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()

    def show_banner(self, subtitle: str) -> None:
        banner_text = Text("FuseSR", style="bold blue")
        banner_text.append("\n", style="")
        banner_text.append(subtitle, style="dim")
        stderr_console.print(Panel(banner_text, border_style="blue", padding=(0, 2)))

    def show_error(self, error: Exception) -> None:
        stderr_console.print(Panel(str(error), title=f"[bold red]{type(error).__name__}[/bold red]",
                                   border_style="red"))

    def display_lut(self, lut: EnvBrdfLut, seconds: float, path: Path) -> None:
        table = Table(title="Split-sum LUT", show_header=True, header_style="bold cyan")
        table.add_column("Quantity", style="cyan")
        table.add_column("Value", justify="right")
        total = lut.scale + lut.bias
        table.add_row("grid", f"{lut.size[0]} x {lut.size[1]}")
        table.add_row("samples / cell", str(lut.sample_count))
        table.add_row("seed", str(lut.seed))
        table.add_row("A range", f"[{lut.scale.min():.4f}, {lut.scale.max():.4f}]")
        table.add_row("B range", f"[{lut.bias.min():.4f}, {lut.bias.max():.4f}]")
        table.add_row("max A+B", f"{total.max():.4f}")
        if lut.stderr is not None:
            table.add_row("max MC std. error", f"{lut.stderr.max():.2e}")
        table.add_row("seconds", f"{seconds:.2f}")
        table.add_row("file", str(path))
        self.console.print(table)

    def display_gradcheck(self, reports: List[GradCheckReport]) -> None:
        table = Table(title="Gradient check", show_header=True, header_style="bold cyan")
        table.add_column("Fragment", style="cyan")
        table.add_column("Block")
        table.add_column("Checked", justify="right")
        table.add_column("Max rel. error", justify="right")
        table.add_column("Status", justify="center")
        for report in reports:
            for block in report.blocks:
                status = "[green]pass[/green]" if block.passed else "[red]FAIL[/red]"
                checked = f"{block.checked}/{block.size}" if block.subsampled else str(block.checked)
                table.add_row(report.fragment, block.name, checked,
                              f"{block.max_rel_error:.2e}", status)
        self.console.print(table)

    def display_metrics(self, summary, title: str = "Evaluation (tone-mapped)") -> None:
        table = Table(title=title, show_header=True, header_style="bold cyan")
        table.add_column("Method", style="cyan")
        table.add_column("PSNR (dB)", justify="right")
        table.add_column("SSIM", justify="right")
        best = summary['psnr_db'].max()
        for _, row in summary.iterrows():
            style = "bold green" if row['psnr_db'] == best else ""
            table.add_row(str(row['method']), f"[{style}]{row['psnr_db']:.2f}[/{style}]" if style
                          else f"{row['psnr_db']:.2f}", f"{row['ssim']:.4f}")
        self.console.print(table)

    def display_trends(self, trends) -> None:
        table = Table(title="Ablation trends (seed-averaged PSNR)", show_header=True, header_style="bold cyan")
        table.add_column("Check", style="cyan")
        table.add_column("dB", justify="right")
        table.add_column("Needed", justify="right")
        table.add_column("Status", justify="center")
        for _, row in trends.iterrows():
            status = "[green]holds[/green]" if row['passed'] else "[red]violated[/red]"
            table.add_row(row['check'], f"{row['value']:+.2f}", f">= {row['threshold']:.1f}", status)
        self.console.print(table)

    def display_bench(self, report) -> None:
        table = Table(title=f"Runtime at {report.hr_size}x{report.hr_size} HR output "
                            f"(median of {report.runs} runs)", show_header=True, header_style="bold cyan")
        table.add_column("Config", style="cyan")
        for stage in ('encoder', 'fusion', 'head', 'total'):
            table.add_column(f"{stage} ms", justify="right")
        table.add_column("GMAC", justify="right")
        for config in report.rows['config'].unique():
            cells = [f"{report.median_ms(config, stage):.1f}" for stage in ('encoder', 'fusion', 'head', 'total')]
            macs = report.rows[(report.rows['config'] == config) & (report.rows['stage'] == 'total')]['macs'].iloc[0]
            table.add_row(config, *cells, f"{macs / 1e9:.2f}")
        self.console.print(table)
        for name, value in report.ratios().items():
            self.console.print(f"  [dim]{name}[/dim] = {value:.2f}x")

    def display_training(self, losses, out_dir: Optional[Path]) -> None:
        table = Table.grid(padding=(0, 2))
        table.add_column(style="cyan")
        table.add_column(justify="right")
        table.add_row("steps", str(int(losses['step'].iloc[-1])))
        table.add_row("first loss", f"{losses['loss'].iloc[0]:.5f}")
        table.add_row("last loss", f"{losses['loss'].iloc[-1]:.5f}")
        smooth = moving_average(losses['loss'], window=min(50, len(losses)))
        if len(smooth):
            table.add_row("last 50-step mean", f"{smooth[-1]:.5f}")
        if out_dir is not None:
            table.add_row("output", str(out_dir))
        self.console.print(Panel(table, title="Training", border_style="green"))


ui = FuseSRConsole()


def handle_errors(func):
    """Map pipeline and I/O failures to exit code 1 with an error panel"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (FuseSRError, OSError) as e:
            logger.debug("command failed", exc_info=True)
            ui.show_error(e)
            sys.exit(1)
    return wrapper


def load_config_option(path: Optional[str]) -> FuseSRConfig:
    if path:
        return config_manager.load_file(path)
    # commands override sections in place; never touch the cached instance
    return FuseSRConfig.from_dict(config_manager.load_config().to_dict())


def _resolve_lut(config: FuseSRConfig, lut_path: Optional[str]) -> EnvBrdfLut:
    if lut_path:
        return load_lut(lut_path, ndotv_floor=config.lut.ndotv_floor)
    return cache_manager.get_or_compute(config.lut)


def _model_overrides(config: FuseSRConfig, variant: Optional[str], r: Optional[int]) -> HNetConfig:
    model = config.model
    if variant == "lite":
        model = HNetConfig.lite(r=r or model.r)
    elif variant == "full":
        model = HNetConfig.full(r=r or model.r)
    elif r is not None:
        model = replace(model, r=r)
    model.validate()
    return model


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('--log-level', default=None, help='Override FUSESR_LOG_LEVEL (DEBUG, INFO, WARNING, ERROR)')
def cli(log_level):
    """FuseSR - real-time super-resolution with HR G-buffer guidance"""
    configure_logging(log_level)


@cli.command()
@click.option('--size', type=int, default=None, help='Grid size per axis (default from config: 32)')
@click.option('--samples', type=int, default=None, help='Monte Carlo samples per cell (default 1024)')
@click.option('--seed', type=int, default=None, help='Global seed')
@click.option('--sampler', type=click.Choice(['hammersley', 'random']), default=None)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True, help='Output LUT file')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def lut(size, samples, seed, sampler, out_path, config_path):
    """Precompute the split-sum BRDF lookup table"""
    config = load_config_option(config_path)
    overrides = {k: v for k, v in dict(size=size, samples=samples, seed=seed, sampler=sampler).items()
                 if v is not None}
    settings = merge_section(config.lut, overrides, 'lut')
    start = time.perf_counter()
    table = precompute_lut(settings.size, settings.size, settings.samples, settings.seed,
                           sampler=settings.sampler, ndotv_floor=settings.ndotv_floor,
                           threads=runtime_settings().threads)
    seconds = time.perf_counter() - start
    save_lut(table, out_path)
    ui.display_lut(table, seconds, Path(out_path))


@cli.command()
@click.option('--scene-seed', type=int, default=None)
@click.option('--path-seed', type=int, default=None)
@click.option('--frames', type=int, default=None)
@click.option('--hr', type=int, default=None, help='HR resolution (square)')
@click.option('--r', 'factor', type=int, default=None, help='Upscaling factor')
@click.option('--path', 'path_kind', type=click.Choice(['static', 'pan', 'orbit']), default=None)
@click.option('--downsample', type=click.Choice(['native', 'box']), default=None)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def gen(scene_seed, path_seed, frames, hr, factor, path_kind, downsample, out_dir, config_path):
    """Render a paired LR/HR sequence with G-buffers"""
    config = load_config_option(config_path)
    overrides = {k: v for k, v in dict(scene_seed=scene_seed, path_seed=path_seed, frames=frames, hr=hr,
                                       r=factor, path=path_kind, downsample=downsample).items()
                 if v is not None}
    settings = merge_section(config.dataset, overrides, 'dataset')
    ui.show_banner(f"rendering {settings.frames} frame(s) at {settings.hr}px, r={settings.r}")
    build_dataset(settings, out_dir)
    ui.console.print(f"[green]wrote[/green] {settings.frames} frame pairs to {out_dir}")


@cli.command(name='train')
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--variant', type=click.Choice(['full', 'lite']), default=None)
@click.option('--steps', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--resume', 'resume_dir', type=click.Path(exists=True, file_okay=False), default=None,
              help='Checkpoint directory (ckpt_NNNNNN) to continue from')
@click.option('--lut', 'lut_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def train_command(data_dir, out_dir, variant, steps, seed, resume_dir, lut_path, config_path):
    """Train H-Net on a generated dataset"""
    config = load_config_option(config_path)
    sequence = load_sequence(data_dir)
    config.model = _model_overrides(config, variant, sequence.r)
    if steps is not None:
        config.train = replace(config.train, steps=steps)
    if seed is not None:
        config.train = replace(config.train, seed=seed)
    table = _resolve_lut(config, lut_path)

    if resume_dir:
        model, run = resume_run(resume_dir, out_dir=out_dir)
        config = run.config
        if steps is not None:
            config.train = replace(config.train, steps=steps)
    else:
        model, run = None, TrainRun.start(config, out_dir=out_dir)

    ui.show_banner(f"training {config.model.variant} r={config.model.r} for {config.train.steps} steps")
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(),
                  TaskProgressColumn(), console=stderr_console) as progress:
        task = progress.add_task("training", total=config.train.steps, completed=run.step)

        def on_step(step, loss):
            progress.update(task, completed=step, description=f"loss {loss.value:.4f}")

        result = train(sequence, config, table, run=run, model=model,
                       threads=runtime_settings().threads, callback=on_step)
    save_model(result.model, Path(out_dir) / "model")
    ui.display_training(result.losses, Path(out_dir))


@cli.command()
@click.option('--model', 'model_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--in', 'in_dir', type=click.Path(exists=True, file_okay=False), required=True,
              help='Dataset directory written by `fusesr gen`')
@click.option('--frame', type=int, default=None, help='Frame index (default: last frame)')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True, help='Output PFM')
@click.option('--lut', 'lut_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def infer(model_dir, in_dir, frame, out_path, lut_path, config_path):
    """Super-resolve one frame and write the HR color as PFM"""
    config = load_config_option(config_path)
    model = load_model(model_dir)
    root = Path(in_dir)
    count = read_sequence_meta(root)['frames']
    t = count - 1 if frame is None else frame
    lr = read_bundle(root / "lr" / frame_dir_name(t))
    hr = read_bundle(root / "hr" / frame_dir_name(t))
    history = [read_bundle(root / "lr" / frame_dir_name(t - k))
               for k in range(1, model.config.n_history + 1) if t - k >= 0]
    table = _resolve_lut(config, lut_path)
    start = time.perf_counter()
    prediction = super_resolve(model, lr, hr.gbuffer, table, history, config.lut.include_diffuse,
                               threads=runtime_settings().threads)
    seconds = time.perf_counter() - start
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_pfm(out_path, prediction.data[0])
    ui.console.print(f"[green]wrote[/green] {out_path} ({prediction.height}x{prediction.width}) "
                     f"in {seconds * 1000:.1f} ms")


@cli.command(name='eval')
@click.option('--model', 'model_dirs', type=click.Path(exists=True, file_okay=False), multiple=True,
              help='Trained model directory; repeatable, named after the directory')
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None, help='Metrics CSV')
@click.option('--r', 'factors', type=int, multiple=True,
              help='Re-render the dataset at these factors (same HR size) and evaluate each')
@click.option('--untrained-ablations', is_flag=True,
              help='Add randomly initialized ablation variants of the first model config')
@click.option('--lut', 'lut_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def eval_command(model_dirs, data_dir, out_path, factors, untrained_ablations, lut_path, config_path):
    """Per-frame PSNR/SSIM for models and bicubic/bilinear baselines"""
    config = load_config_option(config_path)
    table = _resolve_lut(config, lut_path)
    models: Dict[str, HNetModel] = {Path(d).name: load_model(d) for d in model_dirs}
    if untrained_ablations and models:
        base = next(iter(models.values())).config
        for name, variant in ablation_configs(base).items():
            models[f"untrained_{name}"] = HNetModel.create(variant, seed=config.train.seed)

    if factors:
        settings = load_dataset_settings(data_dir)
        frames = []
        for r in factors:
            sequence = generate_sequence(replace(settings, r=r))
            subset = {name: m for name, m in models.items() if m.config.r == r}
            rows = evaluate(subset, sequence, table, include_diffuse=config.lut.include_diffuse,
                            threads=runtime_settings().threads).rows
            rows['method'] = rows['method'] + f"@r{r}"
            frames.append(rows)
        report = EvalReport(rows=pd.concat(frames, ignore_index=True))
    else:
        sequence = load_sequence(data_dir)
        report = evaluate(models, sequence, table, include_diffuse=config.lut.include_diffuse,
                          threads=runtime_settings().threads)

    ui.display_metrics(report.summary())
    if out_path:
        report.to_csv(out_path)
        ui.console.print(f"[green]wrote[/green] {out_path}")


def load_dataset_settings(data_dir) -> DatasetSettings:
    settings = read_sequence_meta(data_dir).get('settings')
    try:
        return DatasetSettings(**settings)
    except TypeError as e:
        raise SchemaError(f"{Path(data_dir) / SEQUENCE_FILE}: settings do not describe a dataset: {e}")


@cli.command(name='ablate')
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--seed', 'seeds', type=int, multiple=True, default=(0, 1, 2), show_default=True,
              help='Training seed; repeatable')
@click.option('--steps', type=int, default=None, help='Training steps per variant (default: config)')
@click.option('--variant', 'variants', type=click.Choice(list(ABLATION_NAMES)), multiple=True,
              help='Train only these variants; repeatable (default: all)')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='Per-seed, per-frame metrics CSV')
@click.option('--strict', is_flag=True, help='Exit 1 when an ordering or margin does not hold')
@click.option('--lut', 'lut_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def ablate_command(data_dir, seeds, steps, variants, out_path, strict, lut_path, config_path):
    """Train every ablation variant per seed and compare held-out PSNR"""
    config = load_config_option(config_path)
    table = _resolve_lut(config, lut_path)
    sequence = load_sequence(data_dir)
    names = list(variants) or list(ABLATION_NAMES)
    steps = config.train.steps if steps is None else steps
    ui.show_banner(f"ablation study: {len(names)} variants x {len(seeds)} seeds, {steps} steps each")
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(),
                  TaskProgressColumn(), console=stderr_console) as progress:
        task = progress.add_task("training", total=len(names) * len(seeds))

        def on_variant(name, seed):
            progress.update(task, advance=1, description=f"{name} seed {seed}")

        report = ablation_study(sequence, config, table, seeds=seeds, steps=steps, variants=names,
                                threads=runtime_settings().threads, callback=on_variant)
    ui.display_metrics(report.summary(), title=f"Ablations after {steps} steps (mean of {len(seeds)} seeds)")
    trends = report.trends()
    ui.display_trends(trends)
    if out_path:
        report.to_csv(out_path)
        ui.console.print(f"[green]wrote[/green] {out_path}")
    if strict and not report.passed:
        failed = ', '.join(trends.loc[~trends['passed'], 'check'])
        raise TrendError(f"ablation trend(s) not reproduced: {failed}")


@cli.command(name='bench')
@click.option('--hr', 'hr_size', type=int, default=512, show_default=True)
@click.option('--runs', type=int, default=20, show_default=True)
@click.option('--warmup', type=int, default=2, show_default=True)
@click.option('--factors', type=int, multiple=True, default=(4, 8), show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None, help='Timing JSON')
@handle_errors
def bench_command(hr_size, runs, warmup, factors, out_path):
    """Median per-stage runtime of full and lite models"""
    report = bench(default_bench_configs(factors), hr_size=hr_size, runs=runs, warmup=warmup,
                   threads=runtime_settings().threads)
    ui.display_bench(report)
    if out_path:
        report.to_json(out_path)
        ui.console.print(f"[green]wrote[/green] {out_path}")


@cli.command(name='gradcheck')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--variant', type=click.Choice(['full', 'lite']), default=None)
@click.option('--r', 'factor', type=int, default=None)
@click.option('--lr-size', type=int, default=8, show_default=True)
@click.option('--tolerance', type=float, default=1e-5, show_default=True)
@click.option('--max-checks', type=int, default=None,
              help='Check a seeded random subset of this many entries per block (default: every entry)')
@click.option('--layers/--no-layers', default=True, help='Also check every layer type on its own')
@handle_errors
def gradcheck_command(config_path, variant, factor, lr_size, tolerance, max_checks, layers):
    """Finite-difference check of every analytic gradient (64-bit)"""
    config = load_config_option(config_path)
    model_config = _model_overrides(config, variant, factor)
    reports = layer_suite(tolerance=tolerance) if layers else []
    reports.append(model_suite(model_config, lr_size=lr_size, tolerance=tolerance, max_checks=max_checks))
    ui.display_gradcheck(reports)
    for report in reports:
        report.raise_if_failed()
    ui.console.print("[green]all blocks pass[/green]")
    if any(block.subsampled for report in reports for block in report.blocks):
        ui.console.print(f"[yellow]sampled: at most {max_checks} entries per block were compared[/yellow]")


@cli.command(name='env')
def env_command():
    """Show package and FUSESR_* variable status"""
    ui.console.print(get_environment().status_table())


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code"""
    try:
        cli.main(args=argv, prog_name='fusesr', standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
