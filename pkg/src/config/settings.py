"""Configuration settings for the near-field pose estimation toolkit"""

from pathlib import Path
from pydantic_settings import BaseSettings
from pydantic import Field


class Settings(BaseSettings):
    """Application settings with environment variable support"""

    # Application Settings
    app_name: str = "Near-Field Multi-MS Pose Estimation"
    app_version: str = "1.0.0"
    debug: bool = Field(False, description="Debug mode (PSD checks on every message)")

    # API Settings
    api_host: str = Field("0.0.0.0", description="API host")
    api_port: int = Field(8000, description="API port")
    api_reload: bool = Field(False, description="API reload")
    api_max_sweep_trials: int = Field(200, ge=1, description="Trials allowed per /sweeps request")

    # Experiment Settings
    default_threads: int = Field(1, ge=1, description="Worker processes for trials")
    default_seed: int = Field(2024, ge=0, description="Base seed when none is given")

    # File Management
    results_dir: Path = Field(Path("results"), description="Results directory")
    logs_dir: Path = Field(Path("logs"), description="Logs directory")

    # Logging
    log_level: str = Field("INFO", description="Log level")
    log_format: str = Field(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log format"
    )

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False
        env_prefix = "NFPAE_"

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        # Ensure results directory exists
        self.results_dir.mkdir(parents=True, exist_ok=True)


# Global settings instance
settings = Settings()
