"""
config.py — Process settings loaded from .env via Pydantic BaseSettings.
All downstream modules import `settings` directly; never read os.environ manually.

Experiment hyperparameters do not live here: they belong to a run's TOML file
(see models/run_config.py) so that a run is reproducible from its directory alone.
"""
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="FLATDIFF_",
        case_sensitive=False,
    )

    # Output
    runs_root: str = "runs"

    # Torch
    torch_threads: int = 1     # >1 breaks bitwise reproducibility of reductions

    # Defaults for CLI flags
    default_seed: int = 0

    # App
    log_level: str = "INFO"
    progress_bar: bool = True


@lru_cache
def get_settings() -> Settings:
    return Settings()


# Module-level singleton used by commands and core modules
settings: Settings = get_settings()
