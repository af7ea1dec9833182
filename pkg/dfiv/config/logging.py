"""
Logging configuration
A single loguru sink on stderr, level and format driven by settings
"""
import sys

from loguru import logger

from dfiv.config.settings import settings

_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
)


def configure_logging(level: str | None = None, serialize: bool | None = None) -> None:
    """Replace loguru's default handler with one honoring the settings."""
    logger.remove()
    logger.add(
        sys.stderr,
        level=(level or settings.LOG_LEVEL).upper(),
        format=_FORMAT,
        serialize=settings.LOG_JSON if serialize is None else serialize,
        backtrace=False,
        diagnose=settings.is_development,
    )
