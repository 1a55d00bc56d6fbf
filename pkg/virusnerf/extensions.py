"""Shared runtime extensions: structured logger and BLAS thread limiter."""
import logging
import os
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger
from threadpoolctl import threadpool_limits

# Root logger of the package; modules log through logging.getLogger(__name__)
logger = logging.getLogger("virusnerf")

# Environment override mirrored by the --threads flag
THREADS_ENV_VAR = "VIRUS_FIELD_THREADS"

_thread_limiter = None


def init_logging(level: str = "INFO", fmt: str = "json", text_format: Optional[str] = None):
    """Attach a single stderr handler to the package logger."""
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(
            jsonlogger.JsonFormatter("%(asctime)s %(name)s %(levelname)s %(message)s")
        )
    else:
        handler.setFormatter(logging.Formatter(text_format or logging.BASIC_FORMAT))

    for existing in list(logger.handlers):
        logger.removeHandler(existing)
    logger.addHandler(handler)
    logger.setLevel(level.upper())
    logger.propagate = False
    return logger


def init_threads(threads: Optional[int] = None):
    """
    Limit BLAS/OpenMP pools.

    Args:
        threads: Thread count; falls back to VIRUS_FIELD_THREADS when None

    Returns:
        The active limit, or None when pools are left untouched
    """
    global _thread_limiter

    if threads is None:
        env_value = os.getenv(THREADS_ENV_VAR)
        threads = int(env_value) if env_value else None
    if threads is None:
        return None
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    if _thread_limiter is not None:
        _thread_limiter.restore_original_limits()
    _thread_limiter = threadpool_limits(limits=threads)
    return threads
