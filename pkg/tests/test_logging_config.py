import logging
from collections import Counter

from src.config.settings import settings
from src.core.logging_config import format_flags, setup_logging, setup_worker_logging


def test_format_flags_is_sorted():
    assert format_flags(Counter(fusion_flat=2, aoa_prior_fallback=1)) == "aoa_prior_fallback=1, fusion_flat=2"
    assert format_flags({}) == "none"


def test_setup_logging_writes_under_logs_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "logs_dir", tmp_path / "logs")
    setup_logging("DEBUG", console=False)
    logging.getLogger("src.services.test").error("boom")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "boom" in (tmp_path / "logs" / "nearfield_pae.log").read_text(encoding="utf-8")
    assert "boom" in (tmp_path / "logs" / "errors.log").read_text(encoding="utf-8")

    setup_worker_logging()
    root = logging.getLogger()
    assert root.level == logging.WARNING
    assert len(root.handlers) == 1
