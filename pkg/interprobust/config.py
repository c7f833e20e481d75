"""
config.py - Process-level configuration

Experiment hyperparameters live in the run config (see models.RunConfig); this only
holds knobs that belong to the process: logging, progress bars, threads, served model.
"""

import os
from typing import List, Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Logging / progress
    LOG_LEVEL: str = "INFO"
    SHOW_PROGRESS: bool = True

    # 0 = all available cores
    THREADS: int = 0

    # Artifacts
    OUTPUT_DIR: str = "runs"

    # HTTP inspection API
    SERVE_CHECKPOINT: Optional[str] = None
    ALLOWED_ORIGINS: List[str] = [
        "http://localhost:3000",
        "http://127.0.0.1:3000",
    ]

    class Config:
        env_prefix = "INTERP_"
        env_file = ".env"
        extra = "ignore"

    def thread_count(self) -> int:
        return self.THREADS if self.THREADS > 0 else (os.cpu_count() or 1)


settings = Settings()
