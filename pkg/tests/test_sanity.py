from src.config import get_settings
from version import get_version


def test_settings_defaults(monkeypatch):
    for name in ("EDETR_OUTPUT_DIR", "EDETR_LOG_LEVEL", "EDETR_NUM_WORKERS"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    settings = get_settings()
    assert settings.output_dir == "runs"
    assert settings.log_level == "INFO"
    assert settings.num_workers == 1
    get_settings.cache_clear()


def test_version_string():
    assert get_version().startswith("v")
