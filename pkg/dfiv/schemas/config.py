"""
Estimator configuration schemas
"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from dfiv.config.settings import settings
from dfiv.exceptions import InvalidSpecError


class DfivConfig(BaseModel):
    """Hyperparameters of the alternating two-stage training loop."""

    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(default=0.1, ge=0)
    lambda2: float = Field(default=0.1, ge=0)
    batch_m: Optional[int] = Field(default=None, ge=1)
    batch_n: Optional[int] = Field(default=None, ge=1)
    inner_stage1: int = Field(default=20, ge=1)
    inner_stage2: int = Field(default=1, ge=1)
    lr: float = Field(default_factory=lambda: settings.ADAM_LR, gt=0)
    epochs: int = Field(default=100, ge=0, description="Outer iterations of the alternating loop")
    seed: int = Field(default=0, ge=0)
    add_intercept: bool = True
    standardize_outcome: bool = False
    early_stop_patience: Optional[int] = Field(default=None, ge=1)
    stage1_gradient: Literal["envelope", "full"] = "envelope"

    def resolve_batches(self, m: int, n: int) -> Tuple[int, int]:
        batch_m = self.batch_m if self.batch_m is not None else min(m, 1000)
        batch_n = self.batch_n if self.batch_n is not None else min(n, 1000)
        if batch_m > m or batch_n > n:
            raise InvalidSpecError(
                f"batch sizes ({batch_m}, {batch_n}) exceed dataset sizes ({m}, {n})"
            )
        return batch_m, batch_n


class ObsConfig(DfivConfig):
    """Observable-confounder variant: adds the observable feature net and the inner-loop policy."""

    xi_dims: List[int] = Field(default_factory=lambda: [128, 64, 32])
    run_to_convergence: bool = True
    stage1_max_inner: int = Field(default=50, ge=1)
    convergence_tol: float = Field(default=1e-4, gt=0)
    full_batch: bool = True

    def resolve_batches(self, m: int, n: int) -> Tuple[int, int]:
        if self.full_batch and self.batch_m is None and self.batch_n is None:
            return m, n
        return super().resolve_batches(m, n)


class TuneGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda1: List[float] = Field(default_factory=lambda: list(settings.LAMBDA_GRID), min_length=1)
    lambda2: List[float] = Field(default_factory=lambda: list(settings.LAMBDA_GRID), min_length=1)

    @field_validator("lambda1", "lambda2")
    @classmethod
    def positive_sorted(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("grid values must be positive")
        return sorted(values)
