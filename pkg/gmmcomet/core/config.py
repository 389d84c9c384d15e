# gmmcomet/core/config.py
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"

    # Suite runner defaults (CLI flags take precedence)
    GMMCOMET_OUTPUT_DIR: str = "results"
    GMMCOMET_JOBS: int = 1
    GMMCOMET_SHOW_PROGRESS: bool = True

    # Pydantic-settings configuration to load from .env file
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding='utf-8', extra='ignore')


settings = Settings()
