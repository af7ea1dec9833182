"""
Experiment run specification and result schemas
"""
import enum
import math
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dfiv.config.settings import settings
from dfiv.schemas.config import DfivConfig, ObsConfig
from dfiv.schemas.datagen import MdpConfig


class Task(str, enum.Enum):
    DEMAND = "demand"
    DEMAND_OBS = "demand_obs"
    HIGHDIM = "highdim"
    LINEAR_GAUSSIAN = "linear_gaussian"
    OPE = "ope"
    ABLATION_JOINT = "ablation_joint"


class Estimator(str, enum.Enum):
    DFIV = "dfiv"
    DFIV_OBS = "dfiv_obs"
    LINEAR_2SLS = "linear_2sls"
    SIEVE = "sieve"
    KIV_RFF = "kiv_rff"
    RIDGE = "ridge"
    TABULAR = "tabular"


COMPATIBLE = {
    Task.DEMAND: {Estimator.DFIV, Estimator.LINEAR_2SLS, Estimator.SIEVE, Estimator.KIV_RFF, Estimator.RIDGE},
    Task.DEMAND_OBS: {Estimator.DFIV_OBS},
    Task.HIGHDIM: {Estimator.DFIV, Estimator.LINEAR_2SLS, Estimator.KIV_RFF, Estimator.RIDGE},
    Task.LINEAR_GAUSSIAN: {
        Estimator.DFIV, Estimator.LINEAR_2SLS, Estimator.SIEVE, Estimator.KIV_RFF, Estimator.RIDGE,
    },
    Task.OPE: {Estimator.TABULAR, Estimator.DFIV},
    Task.ABLATION_JOINT: {Estimator.DFIV},
}

DEFAULT_N = {
    Task.DEMAND: 5000,
    Task.DEMAND_OBS: 5000,
    Task.HIGHDIM: 5000,
    Task.LINEAR_GAUSSIAN: 20_000,
    Task.OPE: 100_000,
    Task.ABLATION_JOINT: 5000,
}

DEFAULT_LAMBDA = {Task.HIGHDIM: 0.01, Task.OPE: 1e-5}


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


class RunSpec(BaseModel):
    """
    One experiment. Generator, estimator and training keys live side by
    side, the way they appear in a flat key=value spec file.
    """

    model_config = ConfigDict(extra="forbid")

    task: Task
    estimator: Estimator = Estimator.DFIV
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, ge=0)
    repeats: int = Field(default=1, ge=1)
    output: Optional[str] = None
    threads: int = Field(default_factory=lambda: settings.DEFAULT_THREADS, ge=1)

    # data
    n: Optional[int] = Field(default=None, ge=2)
    rho: List[float] = Field(default_factory=lambda: [0.5])
    treatment_dim: int = Field(default=64, ge=4)
    slope: float = 2.0
    strength: float = 1.0
    confounding: float = Field(default=0.8, gt=-1, lt=1)
    n_states: int = Field(default=10, ge=1)
    n_actions: int = Field(default=3, ge=1)
    gamma: float = Field(default=0.5, gt=0, lt=1)
    reward_noise_sd: float = Field(default=0.1, ge=0)
    action_noise: float = Field(default=0.3, ge=0, le=0.5)

    # estimator
    lambda1: Optional[float] = Field(default=None, ge=0)
    lambda2: Optional[float] = Field(default=None, ge=0)
    batch_m: Optional[int] = Field(default=None, ge=1)
    batch_n: Optional[int] = Field(default=None, ge=1)
    inner_stage1: int = Field(default=20, ge=1)
    inner_stage2: int = Field(default=1, ge=1)
    lr: float = Field(default_factory=lambda: settings.ADAM_LR, gt=0)
    epochs: int = Field(default=100, ge=0)
    early_stop_patience: Optional[int] = Field(default=None, ge=1)
    standardize: bool = True
    psi_dims: Optional[List[int]] = None
    phi_dims: Optional[List[int]] = None
    xi_dims: Optional[List[int]] = None
    degree: int = Field(default=3, ge=1)
    rff_features: int = Field(default=100, ge=2)
    rff_bandwidth: Union[float, str] = "median"
    run_to_convergence: bool = True

    # tuning
    tune: bool = False
    tune_once: bool = True
    lambda_grid: Optional[List[float]] = None

    @field_validator("rho", "psi_dims", "phi_dims", "xi_dims", "lambda_grid", mode="before")
    @classmethod
    def comma_lists(cls, value):
        return _split_list(value)

    @field_validator("rho")
    @classmethod
    def rho_in_unit_interval(cls, values: List[float]) -> List[float]:
        if not values or any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("rho values must lie in [0, 1]")
        return values

    @field_validator("rff_bandwidth", mode="before")
    @classmethod
    def bandwidth_flag(cls, value):
        if isinstance(value, str) and value.strip().lower() == "median":
            return "median"
        value = float(value)
        if value <= 0:
            raise ValueError("rff_bandwidth must be positive or 'median'")
        return value

    @model_validator(mode="after")
    def estimator_fits_task(self) -> "RunSpec":
        if self.estimator not in COMPATIBLE[self.task]:
            allowed = ", ".join(sorted(e.value for e in COMPATIBLE[self.task]))
            raise ValueError(f"estimator {self.estimator.value} cannot run task {self.task.value} (allowed: {allowed})")
        if self.rff_features % 2:
            raise ValueError("rff_features must be even")
        if self.strength == 0.0:
            raise ValueError("strength 0 leaves the treatment independent of the instrument")
        if self.tune and (self.task is Task.OPE or self.estimator is Estimator.RIDGE):
            raise ValueError(f"{self.task.value}/{self.estimator.value} has no stage losses to tune on")
        return self

    @property
    def sample_size(self) -> int:
        return self.n if self.n is not None else DEFAULT_N[self.task]

    @property
    def uses_rho(self) -> bool:
        return self.task in (Task.DEMAND, Task.DEMAND_OBS, Task.ABLATION_JOINT)

    @property
    def lambdas(self) -> Tuple[float, float]:
        default = DEFAULT_LAMBDA.get(self.task, 0.1)
        return (
            self.lambda1 if self.lambda1 is not None else default,
            self.lambda2 if self.lambda2 is not None else default,
        )

    def dfiv_config(self, seed: int, lambdas: Optional[Tuple[float, float]] = None) -> DfivConfig:
        lambda1, lambda2 = lambdas if lambdas is not None else self.lambdas
        return DfivConfig(
            lambda1=lambda1,
            lambda2=lambda2,
            batch_m=self.batch_m,
            batch_n=self.batch_n,
            inner_stage1=self.inner_stage1,
            inner_stage2=self.inner_stage2,
            lr=self.lr,
            epochs=self.epochs,
            seed=seed,
            add_intercept=self.estimator is not Estimator.TABULAR,
            standardize_outcome=self.standardize and self.task is not Task.OPE,
            early_stop_patience=self.early_stop_patience,
        )

    def obs_config(self, seed: int, lambdas: Optional[Tuple[float, float]] = None) -> ObsConfig:
        base = self.dfiv_config(seed, lambdas).model_dump()
        if self.xi_dims is not None:
            base["xi_dims"] = list(self.xi_dims)
        return ObsConfig(**base, run_to_convergence=self.run_to_convergence)

    def mdp_config(self, seed: int) -> MdpConfig:
        return MdpConfig(
            n_states=self.n_states,
            n_actions=self.n_actions,
            gamma=self.gamma,
            reward_noise_sd=self.reward_noise_sd,
            action_noise=self.action_noise,
            n_transitions=self.sample_size,
            seed=seed,
        )


class RepeatOutcome(BaseModel):
    seed: int
    metric: Optional[float] = None
    error: Optional[str] = None
    details: Dict[str, Optional[float]] = Field(default_factory=dict)
    logs: Dict[str, List[dict]] = Field(default_factory=dict)


class RunResult(BaseModel):
    """Aggregate over repeats. Failed repeats keep their seed and error and are excluded from the statistics."""

    task: Task
    estimator: Estimator
    metric_name: str
    rho: Optional[float] = None
    seeds: List[int]
    metrics: List[Optional[float]]
    mean: Optional[float] = None
    standard_error: Optional[float] = None
    lambda1: float
    lambda2: float
    threads: int = 1
    wall_time_seconds: float = 0.0
    repeats: List[RepeatOutcome] = Field(default_factory=list)
    tuning: Dict[str, List[dict]] = Field(default_factory=dict)
    config: dict = Field(default_factory=dict)

    @property
    def all_failed(self) -> bool:
        return all(metric is None for metric in self.metrics)

    @classmethod
    def aggregate(cls, outcomes: List[RepeatOutcome], **fields) -> "RunResult":
        outcomes = sorted(outcomes, key=lambda outcome: outcome.seed)
        values = [o.metric for o in outcomes if o.metric is not None]
        mean = sum(values) / len(values) if values else None
        if len(values) > 1:
            variance = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
            standard_error = math.sqrt(variance / len(values))
        else:
            standard_error = 0.0 if values else None
        return cls(
            seeds=[o.seed for o in outcomes],
            metrics=[o.metric for o in outcomes],
            mean=mean,
            standard_error=standard_error,
            repeats=outcomes,
            **fields,
        )


class RunReport(BaseModel):
    app_version: str = Field(default_factory=lambda: settings.APP_VERSION)
    command: str = "run"
    results: List[RunResult] = Field(default_factory=list)

    @property
    def has_total_failure(self) -> bool:
        """True when some result lost every repeat."""
        return any(result.all_failed for result in self.results)
