"""
Two-stage regression: closed-form stage solutions, empirical stage losses,
and parameter gradients of the feature maps through those solutions.

Shapes: psi features are m x d1, phi features m x d2, V is d1 x d2, u has
length d1. Losses average over rows and add lambda times the squared
Frobenius norm, so every ridge system is (G + rows * lambda * I).
"""
from typing import NamedTuple, Optional, Union

import numpy as np

from dfiv.exceptions import DimensionMismatchError
from dfiv.models.features import FeatureMap, GradBuffer, Mat
from dfiv.models.iv import Stage1Sol
from dfiv.services.feature_service import backward, forward, strip_intercept, with_intercept
from dfiv.services.linalg_service import ridge_solve, spd_solve


class StageGradient(NamedTuple):
    grads: GradBuffer
    loss: float
    V: Optional[Mat] = None
    u: Optional[Mat] = None


def _V(sol: Union[Stage1Sol, Mat]) -> Mat:
    return sol.V if isinstance(sol, Stage1Sol) else np.asarray(sol, dtype=np.float64)


def _rows(values) -> Mat:
    arr = np.asarray(values, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def stage1_solve(psi_feats: Mat, phi_feats: Mat, lambda1: float) -> Stage1Sol:
    """V = Psi^T Phi (Phi^T Phi + m lambda1 I)^-1, the exact stage-1 ridge minimizer."""
    psi, phi = _rows(psi_feats), _rows(phi_feats)
    if psi.shape[0] != phi.shape[0]:
        raise DimensionMismatchError(f"stage-1 features have {psi.shape[0]} and {phi.shape[0]} rows")
    W = ridge_solve(phi, psi, lambda1, psi.shape[0])
    return Stage1Sol(V=W.T)


def stage1_loss(psi_feats: Mat, phi_feats: Mat, sol: Union[Stage1Sol, Mat], lambda1: float) -> float:
    psi, phi, V = _rows(psi_feats), _rows(phi_feats), _V(sol)
    if V.shape != (psi.shape[1], phi.shape[1]) or psi.shape[0] != phi.shape[0]:
        raise DimensionMismatchError(f"V {V.shape} incompatible with features {psi.shape}, {phi.shape}")
    residual = psi - phi @ V.T
    return float(np.sum(residual**2) / psi.shape[0] + lambda1 * np.sum(V**2))


def stage2_design(sol: Union[Stage1Sol, Mat], phi2_feats: Mat) -> Mat:
    """Rows V phi(z~_i): the predicted treatment features."""
    V, phi2 = _V(sol), _rows(phi2_feats)
    if V.shape[1] != phi2.shape[1]:
        raise DimensionMismatchError(f"V has {V.shape[1]} columns, instrument features {phi2.shape[1]}")
    return phi2 @ V.T


def stage2_solve(sol: Union[Stage1Sol, Mat], phi2_feats: Mat, y: Mat, lambda2: float) -> Mat:
    """u = (V Phi2^T Phi2 V^T + n lambda2 I)^-1 V Phi2^T y."""
    design = stage2_design(sol, phi2_feats)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return ridge_solve(design, y, lambda2, design.shape[0])[:, 0]


def stage2_loss(sol: Union[Stage1Sol, Mat], phi2_feats: Mat, y: Mat, u: Mat, lambda2: float) -> float:
    design = stage2_design(sol, phi2_feats)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    residual = y - design @ u
    return float(np.mean(residual**2) + lambda2 * np.sum(u**2))


class Stage1Projector:
    """
    Caches P = (Phi1^T Phi1 + m lambda1 I)^-1 Phi1^T so that V^T = P Psi1.
    P depends on the instrument map only, so it stays fixed while psi trains.
    """

    def __init__(self, phi1_feats: Mat, lambda1: float):
        phi1 = _rows(phi1_feats)
        m = phi1.shape[0]
        gram = phi1.T @ phi1
        gram[np.diag_indices_from(gram)] += m * lambda1
        self.P = spd_solve(gram, phi1.T)

    def solve(self, psi1_feats: Mat) -> Stage1Sol:
        return Stage1Sol(V=(self.P @ _rows(psi1_feats)).T)


def _solve_through_gradient(psi: Mat, phi: Mat, W: Mat, gW: Mat, lambda1: float) -> Mat:
    """
    Pull a gradient gW on W = A^-1 Phi^T Psi (A = Phi^T Phi + m lambda1 I)
    back to Phi, using d(A^-1) = -A^-1 dA A^-1.
    """
    m = phi.shape[0]
    gram = phi.T @ phi
    gram[np.diag_indices_from(gram)] += m * lambda1
    S = spd_solve(gram, gW)
    return (psi - phi @ W) @ S.T - phi @ S @ W.T


def grad_stage1_thetaZ(
    psi_feats: Mat,
    phi_map: FeatureMap,
    z: Mat,
    lambda1: float,
    add_intercept: bool = True,
    mode: str = "envelope",
) -> StageGradient:
    """
    Gradient of the stage-1 loss with respect to the instrument map, with V
    re-solved as a function of the map. ``mode="envelope"`` holds the exact
    minimizer fixed; ``mode="full"`` also differentiates through the solve.
    The two agree because V is the exact minimizer.
    """
    psi = _rows(psi_feats)
    phi = with_intercept(forward(phi_map, z), add_intercept)
    m = psi.shape[0]
    if phi.shape[0] != m:
        raise DimensionMismatchError("stage-1 batch sizes differ between x and z")
    sol = stage1_solve(psi, phi, lambda1)
    V = sol.V
    residual = psi - phi @ V.T
    upstream = -(2.0 / m) * residual @ V
    if mode == "full":
        W = V.T
        gW = -(2.0 / m) * phi.T @ residual + 2.0 * lambda1 * W
        upstream = upstream + _solve_through_gradient(psi, phi, W, gW, lambda1)
    elif mode != "envelope":
        raise ValueError(f"unknown stage-1 gradient mode {mode!r}")
    grads = backward(phi_map, z, strip_intercept(upstream, add_intercept))
    loss = float(np.sum(residual**2) / m + lambda1 * np.sum(V**2))
    return StageGradient(grads=grads, loss=loss, V=V)


def grad_stage2_thetaX(
    psi_map: FeatureMap,
    x1: Mat,
    projector: Stage1Projector,
    phi2_feats: Mat,
    y2: Mat,
    lambda2: float,
    add_intercept: bool = True,
) -> StageGradient:
    """
    Gradient of the stage-2 loss with respect to the treatment map. u is the
    exact stage-2 minimizer (envelope), V = (P Psi1)^T carries the dependence
    on the map: upstream -> V -> Psi1 -> MLP backward.
    """
    psi1 = with_intercept(forward(psi_map, x1), add_intercept)
    phi2 = _rows(phi2_feats)
    y = np.asarray(y2, dtype=np.float64).reshape(-1)
    n = phi2.shape[0]
    sol = projector.solve(psi1)
    design = stage2_design(sol, phi2)
    u = ridge_solve(design, y, lambda2, n)[:, 0]
    residual = y - design @ u
    grad_design = -(2.0 / n) * np.outer(residual, u)
    grad_psi1 = projector.P.T @ (phi2.T @ grad_design)
    grads = backward(psi_map, x1, strip_intercept(grad_psi1, add_intercept))
    loss = float(np.mean(residual**2) + lambda2 * np.sum(u**2))
    return StageGradient(grads=grads, loss=loss, V=sol.V, u=u)


class JointGradient(NamedTuple):
    grads_x: GradBuffer
    grads_z: GradBuffer
    loss: float
    stage1_loss: float


def grad_joint(
    psi_map: FeatureMap,
    phi_map: FeatureMap,
    x1: Mat,
    z1: Mat,
    z2: Mat,
    y2: Mat,
    lambda1: float,
    lambda2: float,
    add_intercept: bool = True,
) -> JointGradient:
    """
    Gradients of the stage-2 loss with respect to both maps at once, V and u
    analytic. This is the joint objective that fails to identify the
    structural function; it exists for the ablation.
    """
    psi1 = with_intercept(forward(psi_map, x1), add_intercept)
    phi1 = with_intercept(forward(phi_map, z1), add_intercept)
    phi2 = with_intercept(forward(phi_map, z2), add_intercept)
    y = np.asarray(y2, dtype=np.float64).reshape(-1)
    m, n = phi1.shape[0], phi2.shape[0]

    projector = Stage1Projector(phi1, lambda1)
    sol = projector.solve(psi1)
    W = sol.V.T
    design = phi2 @ W
    u = ridge_solve(design, y, lambda2, n)[:, 0]
    residual = y - design @ u
    grad_design = -(2.0 / n) * np.outer(residual, u)

    grad_psi1 = projector.P.T @ (phi2.T @ grad_design)
    grad_phi2 = grad_design @ W.T
    grad_phi1 = _solve_through_gradient(psi1, phi1, W, phi2.T @ grad_design, lambda1)

    grads_x = backward(psi_map, x1, strip_intercept(grad_psi1, add_intercept))
    grads_z = backward(phi_map, z1, strip_intercept(grad_phi1, add_intercept))
    backward(phi_map, z2, strip_intercept(grad_phi2, add_intercept), into=grads_z)

    loss = float(np.mean(residual**2) + lambda2 * np.sum(u**2))
    s1 = float(np.sum((psi1 - phi1 @ W) ** 2) / m + lambda1 * np.sum(W**2))
    return JointGradient(grads_x=grads_x, grads_z=grads_z, loss=loss, stage1_loss=s1)
