"""
Dense linear algebra: SPD solves with a jitter ladder, the ridge normal
equations, and seeded Gaussian sampling.
"""
from typing import Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import linalg as sla

from dfiv.config.settings import settings
from dfiv.exceptions import DimensionMismatchError, NonFiniteError, SingularSystemError
from dfiv.models.features import Mat
from dfiv.models.rng import RngStream


def _as_2d(values, name: str) -> Mat:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _cholesky_solve(A: Mat, B: Mat) -> Mat:
    factor = sla.cho_factor(A, lower=True, check_finite=False)
    return sla.cho_solve(factor, B, check_finite=False)


def spd_solve(
    A: Mat,
    B: Mat,
    return_residual: bool = False,
    jitter_ladder: Sequence[float] | None = None,
) -> Union[Mat, Tuple[Mat, float]]:
    """
    Solve A X = B for symmetric positive definite A by Cholesky.

    On factorization failure the diagonal is lifted by each rung of the
    jitter ladder times trace(A)/d in turn; if every rung fails the system
    is reported singular.
    """
    A = _as_2d(A, "A")
    B_in = np.asarray(B, dtype=np.float64)
    B = _as_2d(B_in, "B")
    d = A.shape[0]
    if d < 1 or A.shape != (d, d):
        raise DimensionMismatchError(f"A must be square and non-empty, got {A.shape}")
    if B.shape[0] != d:
        raise DimensionMismatchError(f"B has {B.shape[0]} rows, A is {d}x{d}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NonFiniteError("spd_solve received non-finite entries")
    scale = max(float(np.max(np.abs(A))), 1.0)
    if not np.allclose(A, A.T, rtol=0.0, atol=settings.SYMMETRY_TOL * scale):
        raise DimensionMismatchError("spd_solve requires a symmetric matrix")

    ladder = settings.JITTER_LADDER if jitter_ladder is None else jitter_ladder
    try:
        X = _cholesky_solve(A, B)
    except np.linalg.LinAlgError:
        X = None
        base = float(np.trace(A)) / d
        for rung in ladder:
            jitter = rung * base
            logger.warning("⚠️ Cholesky failed, retrying with diagonal jitter {:.3e}", jitter)
            try:
                X = _cholesky_solve(A + jitter * np.eye(d), B)
                break
            except np.linalg.LinAlgError:
                continue
        if X is None:
            raise SingularSystemError(f"system of size {d} is not positive definite after jitter retries")
    if not np.all(np.isfinite(X)):
        raise SingularSystemError("solve produced non-finite values")

    if B_in.ndim == 1:
        X = X[:, 0]
    if return_residual:
        residual = float(np.linalg.norm(A @ X - B_in.reshape(X.shape)))
        return X, residual
    return X


def ridge_solve(design: Mat, targets: Mat, reg: float, sample_count: int) -> Mat:
    """
    Minimizer W of (1/sample_count) ||T - D W||^2 + reg ||W||^2, i.e. the
    solution of (D^T D + sample_count * reg * I) W = D^T T.
    """
    D = _as_2d(design, "design")
    T = _as_2d(targets, "targets")
    if D.shape[0] != T.shape[0]:
        raise DimensionMismatchError(f"design has {D.shape[0]} rows, targets have {T.shape[0]}")
    if reg < 0:
        raise ValueError("ridge regularization must be non-negative")
    gram = D.T @ D
    gram[np.diag_indices_from(gram)] += sample_count * reg
    try:
        return spd_solve(gram, D.T @ T)
    except SingularSystemError as exc:
        raise SingularSystemError(f"ridge system singular at reg={reg}: {exc.detail}") from exc


def sample_gaussian(rng: RngStream, mean: float, sd: float, n: int) -> Mat:
    if sd < 0:
        raise ValueError("standard deviation must be non-negative")
    if sd == 0:
        return np.full(n, float(mean))
    return rng.generator.normal(loc=mean, scale=sd, size=n)
