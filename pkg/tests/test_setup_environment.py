import logging

from rich.logging import RichHandler

from setup_environment import ENV_VARIABLES, EnvironmentSetup, configure_logging, log_event


def test_runtime_settings_read_variables(tmp_path, monkeypatch):
    monkeypatch.setenv("FUSESR_THREADS", "3")
    monkeypatch.setenv("FUSESR_LOG_LEVEL", "debug")
    monkeypatch.setenv("FUSESR_HOME", str(tmp_path))
    settings = EnvironmentSetup(tmp_path / ".env").runtime_settings()
    assert settings.threads == 3
    assert settings.log_level == "DEBUG"
    assert settings.home == str(tmp_path)


def test_bad_thread_count_falls_back_to_one(tmp_path, monkeypatch):
    monkeypatch.setenv("FUSESR_THREADS", "many")
    assert EnvironmentSetup(tmp_path / ".env").runtime_settings().threads == 1
    monkeypatch.setenv("FUSESR_THREADS", "-4")
    assert EnvironmentSetup(tmp_path / ".env").runtime_settings().threads == 1


def test_dotenv_file_is_loaded_without_overriding(tmp_path, monkeypatch):
    monkeypatch.setenv("FUSESR_THREADS", "0")
    monkeypatch.delenv("FUSESR_THREADS")
    monkeypatch.setenv("FUSESR_LOG_LEVEL", "ERROR")
    env_file = tmp_path / ".env"
    env_file.write_text("FUSESR_THREADS=2\nFUSESR_LOG_LEVEL=DEBUG\n")
    settings = EnvironmentSetup(env_file).runtime_settings()
    assert settings.threads == 2
    assert settings.log_level == "ERROR"


def test_status_table_lists_variables(tmp_path):
    table = EnvironmentSetup(tmp_path / ".env").status_table()
    items = list(table.columns[0].cells)
    for name in ENV_VARIABLES:
        assert name in items
    assert 'numpy' in items


def test_configure_logging_installs_one_handler():
    configure_logging("WARNING")
    configure_logging("INFO")
    root = logging.getLogger()
    assert sum(isinstance(h, RichHandler) for h in root.handlers) == 1
    assert root.level == logging.INFO


def test_log_event_formats_fields(caplog):
    logger = logging.getLogger("fusesr.test")
    with caplog.at_level(logging.INFO, logger="fusesr.test"):
        log_event(logger, "train", step=5, loss=0.123456789)
        log_event(logger, "hidden", level=logging.DEBUG, step=1)
    assert [r.getMessage() for r in caplog.records] == ["train step=5 loss=0.123457"]
