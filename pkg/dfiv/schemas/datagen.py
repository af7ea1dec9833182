"""
Synthetic generator configuration schemas
"""
import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


class DemandConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rho: float = Field(default=0.5, ge=0, le=1)
    n_total: int = Field(default=5000, ge=2)
    seed: int = Field(default=0, ge=0)


class HighDimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    treatment_dim: int = Field(default=64, ge=4)
    embedding_seed: int = Field(default=0, ge=0)
    embedding_bandwidth: float = Field(default=1.0, gt=0)
    outcome_rows: int = Field(default=10, ge=1)
    eta_sd: float = Field(default=math.sqrt(0.1), ge=0)
    eps_sd: float = Field(default=math.sqrt(0.5), ge=0)
    c0: Optional[float] = None
    c1: Optional[float] = Field(default=None, gt=0)
    calibration_draws: int = Field(default=10_000, ge=2)
    fixed_pos_y: Optional[float] = Field(default=None, ge=0, le=1)


class LinearGaussianConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    slope: float = 2.0
    strength: float = 1.0
    confounding: float = 0.8
    n: int = Field(default=10_000, ge=1, description="Rows per stage")
    seed: int = Field(default=0, ge=0)

    @field_validator("confounding")
    @classmethod
    def strictly_inside_unit(cls, v: float) -> float:
        if not -1.0 < v < 1.0:
            raise ValueError("confounding correlation must satisfy |r| < 1")
        return v

    @field_validator("strength")
    @classmethod
    def relevant_instrument(cls, v: float) -> float:
        if v == 0.0:
            raise ValueError("instrument strength 0 makes X independent of Z")
        return v


class MdpConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_states: int = Field(default=10, ge=1)
    n_actions: int = Field(default=3, ge=1)
    gamma: float = Field(default=0.5, gt=0, lt=1)
    reward_noise_sd: float = Field(default=0.1, ge=0)
    action_noise: float = Field(default=0.3, ge=0, le=0.5)
    n_transitions: int = Field(default=100_000, ge=2)
    seed: int = Field(default=0, ge=0)
