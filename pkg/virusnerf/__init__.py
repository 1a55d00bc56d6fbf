"""Runtime factory and initialization."""
from dataclasses import dataclass
from typing import Optional

from config import Config, get_config
from virusnerf.extensions import init_logging, init_threads


@dataclass
class Runtime:
    """Resolved settings plus the effective thread limit."""

    config: Config
    threads: Optional[int]


def create_app(config_name: Optional[str] = None, threads: Optional[int] = None) -> Runtime:
    """Create and configure the runtime shared by every command."""
    app_config = get_config(config_name)

    # Initialize extensions
    init_logging(app_config.LOG_LEVEL, app_config.LOG_FORMAT, app_config.LOG_TEXT_FORMAT)
    effective_threads = init_threads(
        threads if threads is not None else app_config.VIRUS_FIELD_THREADS
    )

    return Runtime(config=app_config, threads=effective_threads)
