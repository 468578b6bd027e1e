"""
Application Configuration
Loads environment variables (prefix GADAN_) and provides process settings
"""

from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# .env in the project root
_PROJECT_ROOT = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """Process settings loaded from environment variables"""

    # Application
    APP_NAME: str = "GA-DAN"
    APP_VERSION: str = "1.0.0"

    # Logging verbosity (GADAN_LOG_LEVEL)
    LOG_LEVEL: Literal["error", "warn", "info", "debug"] = "info"

    # Torch device for training and inference
    DEVICE: str = "cpu"

    # Output naming inside checkpoint_dir
    METRICS_FILENAME: str = "metrics.jsonl"
    CHECKPOINT_PREFIX: str = "checkpoint"

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def _lower_level(cls, value: str) -> str:
        return value.lower() if isinstance(value, str) else value

    model_config = SettingsConfigDict(
        env_prefix="GADAN_",
        env_file=str(_PROJECT_ROOT / ".env"),
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
