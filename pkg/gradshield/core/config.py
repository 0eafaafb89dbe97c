"""
Application configuration management
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings, read from GRADSHIELD_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="GRADSHIELD_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "gradshield"
    APP_VERSION: str = "0.3.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "json"  # json or console

    # Execution
    THREADS: int = 4  # cap for thread pools
    RUNS_DIR: str = "runs"
    DEFAULT_SEED: int = 42

    # Numerics
    FD_STEP: float = 1e-4  # central-difference step, scaled by max(1, |x_i|)
    EXPOSURE_SAMPLE_CAP: int = 128
    PARALLEL_CHUNK: int = 4096  # Monte Carlo draws per batch
    CHUNK_ELEMENTS: int = 4_000_000  # upper bound on floats held by one batch

    # Noise scheduling
    NOISE_FLOOR: float = 1e-6
    SIGMA_MAX: float = 1e-2
    DEFAULT_DELTA_PROB: float = 0.05
    DEFAULT_KAPPA: float = 0.9


# Global settings instance
settings = Settings()
