"""Application configuration."""
import os
from typing import Literal, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Config(BaseSettings):
    """Base configuration."""

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # Runtime
    VIRUS_FIELD_ENV: str = "development"
    VIRUS_FIELD_THREADS: Optional[int] = None

    # Paths
    DATA_DIR: str = "data"
    OUTPUT_DIR: str = "runs"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["json", "text"] = "json"
    LOG_TEXT_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Training defaults
    LOG_EVERY_STEPS: int = 50
    CHECKPOINT_EVERY_STEPS: int = 500

    # Evaluation
    EVAL_POSE_STRIDE: int = 5
    SCAN_ANGULAR_STEP_DEG: float = 1.0


class DevelopmentConfig(Config):
    """Development configuration."""

    LOG_LEVEL: str = "DEBUG"


class TestingConfig(Config):
    """Testing configuration."""

    VIRUS_FIELD_THREADS: Optional[int] = 1
    LOG_LEVEL: str = "WARNING"
    LOG_FORMAT: Literal["json", "text"] = "text"
    LOG_EVERY_STEPS: int = 1
    CHECKPOINT_EVERY_STEPS: int = 10
    EVAL_POSE_STRIDE: int = 3
    SCAN_ANGULAR_STEP_DEG: float = 10.0


class ProductionConfig(Config):
    """Production configuration."""

    LOG_LEVEL: str = "INFO"


# Configuration dictionary
config = {
    "development": DevelopmentConfig,
    "testing": TestingConfig,
    "production": ProductionConfig,
    "default": DevelopmentConfig,
}


def get_config(env: Optional[str] = None) -> Config:
    """Get configuration based on environment."""
    if env is None:
        env = os.getenv("VIRUS_FIELD_ENV", "development")
    return config.get(env, config["default"])()
