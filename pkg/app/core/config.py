"""
Application configuration settings.
"""
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Toolkit settings."""

    # App
    APP_NAME: str = "Illusion Toolkit"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Embedding service
    DATABASE_URL: str = "sqlite+aiosqlite:///./illusion_usage.db"
    HOST: str = "127.0.0.1"
    PORT: int = 8000
    PRICE_PER_QUERY: float = 0.00006
    MODEL_VERSION: str = "toy-1"
    API_KEY_HEADER: str = "X-API-Key"
    ANONYMOUS_CLIENT: str = "anonymous"
    REQUEST_TIMEOUT: float = 30.0

    # Reproducibility
    # ILLUSION_SEED, when set, overrides every seed given on the command line.
    ILLUSION_SEED: Optional[int] = None
    DEFAULT_SEED: int = 0

    # Query attack: how often (in queries) the success predicate is checked
    CHECK_EVERY: int = 100

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
