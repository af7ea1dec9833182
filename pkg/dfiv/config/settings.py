"""
Application Settings Configuration
Handles environment variables and numerical defaults for the DFIV toolkit
"""
from typing import Annotated, List

from dotenv import load_dotenv
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, NoDecode, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="DFIV_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # App Information
    APP_NAME: str = Field(default="dfiv")
    APP_VERSION: str = Field(default="1.0.0")
    APP_DESCRIPTION: str = Field(
        default="Deep feature instrumental variable regression and baselines."
    )

    # Environment
    ENVIRONMENT: str = Field(default="development")
    LOG_LEVEL: str = Field(default="INFO")
    LOG_JSON: bool = Field(default=False)

    # Output
    RESULTS_DIR: str = Field(default="results")
    DEFAULT_SEED: int = Field(default=0, ge=0)
    DEFAULT_THREADS: int = Field(default=1, ge=1)

    # Adam defaults
    ADAM_LR: float = Field(default=1e-3, gt=0)
    ADAM_BETA1: float = Field(default=0.9, ge=0, lt=1)
    ADAM_BETA2: float = Field(default=0.999, ge=0, lt=1)
    ADAM_EPS: float = Field(default=1e-8, gt=0)

    # Linear algebra
    JITTER_LADDER: Annotated[List[float], NoDecode] = Field(default=[1e-12, 1e-10, 1e-8])
    SYMMETRY_TOL: float = Field(default=1e-8, gt=0)

    # Training
    DIVERGENCE_THRESHOLD: float = Field(default=1e12, gt=0)
    EARLY_STOP_PATIENCE: int = Field(default=20, ge=1)
    MEDIAN_EXACT_LIMIT: int = Field(default=2000, ge=2)

    # Tuning
    TUNING_EPOCH_FRACTION: float = Field(default=0.25, gt=0, le=1)
    LAMBDA_GRID: Annotated[List[float], NoDecode] = Field(default=[1e-4, 1e-3, 1e-2, 1e-1, 1.0])

    @field_validator("JITTER_LADDER", "LAMBDA_GRID", mode="before")
    @classmethod
    def parse_float_list(cls, v):
        if isinstance(v, str):
            return [float(item) for item in v.strip().strip("[]").split(",") if item.strip()]
        return v

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT.lower() == "production"

    @property
    def is_development(self) -> bool:
        return self.ENVIRONMENT.lower() == "development"


# Global settings instance
settings = Settings()
