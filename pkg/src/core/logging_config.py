"""Centralized logging configuration for the CLI, the API and sweep workers"""

import logging
import sys
from collections.abc import Mapping
from logging.handlers import RotatingFileHandler

from ..config.settings import settings

CONSOLE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class ColoredFormatter(logging.Formatter):
    """Console formatter that colours the level name"""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def format(self, record):
        color = self.COLORS.get(record.levelname)
        if color is None or not sys.stderr.isatty():
            return super().format(record)
        # copy: the file handlers see the same record
        record = logging.makeLogRecord(record.__dict__)
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


def _clear(root: logging.Logger):
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()


def setup_logging(level: str | None = None, console: bool = True):
    """Console on stderr plus rotating run and error logs under settings.logs_dir.

    stdout is left alone so the CLI can stream CSV through it.
    """
    logs_dir = settings.logs_dir
    logs_dir.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    root.setLevel(getattr(logging, (level or settings.log_level).upper()))
    _clear(root)

    if console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.DEBUG if level and level.upper() == "DEBUG" else logging.INFO)
        console_handler.setFormatter(ColoredFormatter(CONSOLE_FORMAT))
        root.addHandler(console_handler)

    file_formatter = logging.Formatter(settings.log_format)
    for name, handler_level, max_mb, backups in (("nearfield_pae.log", logging.DEBUG, 10, 5),
                                                 ("errors.log", logging.ERROR, 5, 3)):
        handler = RotatingFileHandler(logs_dir / name, maxBytes=max_mb * 1024 * 1024,
                                      backupCount=backups, encoding="utf-8")
        handler.setLevel(handler_level)
        handler.setFormatter(file_formatter)
        root.addHandler(handler)

    for noisy in ("uvicorn", "httpx", "matplotlib"):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    # numerics chatter at DEBUG only in debug mode
    logging.getLogger("src.core").setLevel(logging.DEBUG if settings.debug else logging.INFO)
    logging.getLogger("src.services").setLevel(logging.INFO)
    logging.getLogger("src.api").setLevel(logging.INFO)

    logging.getLogger(__name__).debug(f"Logging to {logs_dir}")


def setup_worker_logging():
    """Sweep worker processes: warnings to stderr, no rotating files"""
    root = logging.getLogger()
    _clear(root)
    root.setLevel(logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(settings.log_format))
    root.addHandler(handler)


def format_flags(flags: Mapping[str, int]) -> str:
    """Stable 'name=count' rendering of a flag counter"""
    return ", ".join(f"{name}={count}" for name, count in sorted(flags.items())) or "none"
