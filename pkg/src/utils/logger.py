"""
Logging configuration for the IES token economy simulator
"""
import sys
from typing import Optional

from loguru import logger
from config.settings import get_settings, ensure_log_directory

CONSOLE_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{extra[name]}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {extra[name]}:{function}:{line} - {message}"


def setup_logger(level: Optional[str] = None, to_file: bool = True):
    """Configure the console sink (stderr) and the rotating simulation log file.

    stdout is left alone: the CLI prints its tables and the machine-readable
    summary line there.
    """
    settings = get_settings()

    logger.remove()
    logger.configure(extra={"name": "sim"})

    logger.add(
        sys.stderr,
        level=(level or settings.log_level).upper(),
        format=CONSOLE_FORMAT,
        colorize=True,
    )

    if to_file:
        ensure_log_directory()
        logger.add(
            settings.log_file,
            level="DEBUG",
            format=FILE_FORMAT,
            rotation="10 MB",
            retention="30 days",
            compression="zip",
        )

    return logger


def get_logger(name: str):
    """Get a logger bound to a simulator component name"""
    return logger.bind(name=name)
