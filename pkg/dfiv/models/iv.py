"""
Instrumental-variable data and fitted-model types
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from dfiv.exceptions import DimensionMismatchError, MissingDataError, NonFiniteError
from dfiv.models.features import Featurizer, Mat


def _as_matrix(values, name: str) -> Mat:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def _as_vector(values, name: str) -> Mat:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass
class JointTriples:
    """Rows observed jointly as (x, y, z[, o]); used for out-of-sample stage losses."""

    x: Mat
    y: Mat
    z: Mat
    o: Optional[Mat] = None

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class IvDataset:
    """
    Stage-1 pairs (x_i, z_i) and stage-2 pairs (y_i, z_i). The complementary
    columns (stage-1 y, stage-2 x) are optional; when both are present the
    data supports out-of-sample stage losses for tuning.
    """

    stage1_x: Mat
    stage1_z: Mat
    stage2_y: Mat
    stage2_z: Mat
    stage1_o: Optional[Mat] = None
    stage2_o: Optional[Mat] = None
    stage1_y: Optional[Mat] = None
    stage2_x: Optional[Mat] = None

    def __post_init__(self) -> None:
        self.stage1_x = _as_matrix(self.stage1_x, "stage1_x")
        self.stage1_z = _as_matrix(self.stage1_z, "stage1_z")
        self.stage2_y = _as_vector(self.stage2_y, "stage2_y")
        self.stage2_z = _as_matrix(self.stage2_z, "stage2_z")
        if self.stage1_o is not None:
            self.stage1_o = _as_matrix(self.stage1_o, "stage1_o")
        if self.stage2_o is not None:
            self.stage2_o = _as_matrix(self.stage2_o, "stage2_o")
        if self.stage1_y is not None:
            self.stage1_y = _as_vector(self.stage1_y, "stage1_y")
        if self.stage2_x is not None:
            self.stage2_x = _as_matrix(self.stage2_x, "stage2_x")

        m, n = self.stage1_x.shape[0], self.stage2_y.shape[0]
        if m < 1 or n < 1:
            raise DimensionMismatchError("both stages need at least one row")
        for name in ("stage1_z", "stage1_o", "stage1_y"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != m:
                raise DimensionMismatchError(f"{name} has {value.shape[0]} rows, stage 1 has {m}")
        for name in ("stage2_z", "stage2_o", "stage2_x"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != n:
                raise DimensionMismatchError(f"{name} has {value.shape[0]} rows, stage 2 has {n}")
        if self.stage1_z.shape[1] != self.stage2_z.shape[1]:
            raise DimensionMismatchError("instrument width differs between stages")
        if (self.stage1_o is None) != (self.stage2_o is None):
            raise MissingDataError("observables must be present in both stages or neither")
        for name, value in self.arrays().items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"{name} contains non-finite values")

    def arrays(self) -> Dict[str, Mat]:
        names = ("stage1_x", "stage1_z", "stage2_y", "stage2_z", "stage1_o", "stage2_o", "stage1_y", "stage2_x")
        return {name: getattr(self, name) for name in names if getattr(self, name) is not None}

    @property
    def m(self) -> int:
        return self.stage1_x.shape[0]

    @property
    def n(self) -> int:
        return self.stage2_y.shape[0]

    @property
    def has_observables(self) -> bool:
        return self.stage1_o is not None

    @property
    def has_joint(self) -> bool:
        return self.stage1_y is not None and self.stage2_x is not None

    def stage1_instruments(self) -> Mat:
        """Instrument-side inputs for stage 1: z, or (z, o) when observables exist."""
        if self.stage1_o is None:
            return self.stage1_z
        return np.hstack([self.stage1_z, self.stage1_o])

    def stage2_instruments(self) -> Mat:
        if self.stage2_o is None:
            return self.stage2_z
        return np.hstack([self.stage2_z, self.stage2_o])

    def joint_stage1(self) -> JointTriples:
        if self.stage1_y is None:
            raise MissingDataError("stage-1 outcomes are required for out-of-sample stage-2 loss")
        return JointTriples(self.stage1_x, self.stage1_y, self.stage1_z, self.stage1_o)

    def joint_stage2(self) -> JointTriples:
        if self.stage2_x is None:
            raise MissingDataError("stage-2 treatments are required for out-of-sample stage-1 loss")
        return JointTriples(self.stage2_x, self.stage2_y, self.stage2_z, self.stage2_o)


@dataclass
class Stage1Sol:
    V: Mat

    @property
    def shape(self):
        return self.V.shape


@dataclass
class StructuralModel:
    """
    f(x[, o]) = y_mean + y_scale * u^T feats(x[, o]) where feats is psi(x)
    (plus intercept) or, with observables, the row-major tensor product of
    the treatment and observable features.
    """

    u: Mat
    psi: Featurizer
    xi: Optional[Featurizer] = None
    add_intercept: bool = True
    y_mean: float = 0.0
    y_scale: float = 1.0
    phi: Optional[Featurizer] = None
    stage1: Optional[Stage1Sol] = None

    @property
    def tensor_product(self) -> bool:
        return self.xi is not None

    @property
    def treatment_dim(self) -> int:
        return self.psi.output_dim + int(self.add_intercept)

    @property
    def feature_dim(self) -> int:
        if self.xi is None:
            return self.treatment_dim
        return self.treatment_dim * (self.xi.output_dim + int(self.add_intercept))

    def __post_init__(self) -> None:
        self.u = _as_vector(self.u, "u")
        if self.u.shape[0] != self.feature_dim:
            raise DimensionMismatchError(
                f"u has length {self.u.shape[0]}, features have dimension {self.feature_dim}"
            )
        if not np.all(np.isfinite(self.u)):
            raise NonFiniteError("structural weights contain non-finite values")


@dataclass
class EvaluationGrid:
    """Evaluation points with the noise-free structural function."""

    x: Mat
    truth: Mat
    o: Optional[Mat] = None
    columns: Optional[list] = None

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class SyntheticData:
    """A generated dataset with its hidden ground truth."""

    dataset: IvDataset
    test_grid: EvaluationGrid
    hidden: Dict[str, Mat] = field(default_factory=dict)
    columns: Dict[str, list] = field(default_factory=dict)
