"""Unified logging configuration for register-adapt.

This module defines a helper function to configure Python's logging module
for a console handler and, optionally, a rotating file handler. The CLI
calls ``setup_logging()`` once at startup; every other component retrieves
named loggers via ``get_logger(name)``.

The log level comes from the ``LOG_LEVEL`` value resolved by
``config_manager`` (config file first, then the process environment).
"""

from __future__ import annotations

import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Optional


def setup_logging(log_level: str, log_file_path: Optional[str] = None) -> None:
    """Configure the root logger.

    Parameters
    ----------
    log_level: str
        The minimum severity level to emit (e.g. "DEBUG", "INFO").
    log_file_path: str, optional
        Path to the file where logs should be written. When omitted only the
        console handler is installed.

    Notes
    -----
    This function should be called exactly once, at the very beginning of
    the application lifecycle. Subsequent calls will have no effect.
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    if logging.getLogger().handlers:
        return

    formatter = logging.Formatter(
        fmt="%(asctime)s [%(levelname)s] [%(name)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    handlers: list[logging.Handler] = []

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(level)
    handlers.append(console_handler)

    if log_file_path:
        parent = os.path.dirname(log_file_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        # 10MB with 5 backups
        file_handler = RotatingFileHandler(log_file_path, maxBytes=10 * 1024 * 1024, backupCount=5)
        file_handler.setFormatter(formatter)
        file_handler.setLevel(level)
        handlers.append(file_handler)

    logging.basicConfig(level=level, handlers=handlers)


def get_logger(name: str) -> logging.Logger:
    """Retrieve a named logger.

    Components should call this instead of creating their own loggers
    directly. Without ``setup_logging()`` records propagate to Python's
    default last-resort handler (warnings and above).
    """
    return logging.getLogger(name)
