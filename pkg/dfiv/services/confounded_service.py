"""
Observable-confounder variant. The structural features are the row-major
tensor product psi(x) (x) xi(o) = vec(psi xi^T); stage 1 regresses psi(x)
on phi(z, o) exactly as in the plain case.
"""
from typing import NamedTuple, Union

import numpy as np

from dfiv.exceptions import DimensionMismatchError
from dfiv.models.features import FeatureMap, GradBuffer, Mat
from dfiv.models.iv import Stage1Sol
from dfiv.services.feature_service import backward, forward, strip_intercept, with_intercept
from dfiv.services.linalg_service import ridge_solve
from dfiv.services.stage_service import Stage1Projector, stage1_solve, stage2_design


def tensor_product(a: Mat, b: Mat) -> Mat:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DimensionMismatchError("tensor product factors must be non-empty")
    return np.outer(a, b).reshape(-1)


def rowwise_tensor_product(A: Mat, B: Mat) -> Mat:
    """Row i is tensor_product(A[i], B[i])."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatchError(f"tensor factors have {A.shape[0]} and {B.shape[0]} rows")
    return np.einsum("ij,ik->ijk", A, B).reshape(A.shape[0], A.shape[1] * B.shape[1])


def stage1_solve_obs(psi_feats: Mat, phi_zo_feats: Mat, lambda1: float) -> Stage1Sol:
    """Stage 1 with instrument features computed on the concatenation (z, o)."""
    return stage1_solve(psi_feats, phi_zo_feats, lambda1)


def stage2_design_obs(sol: Union[Stage1Sol, Mat], phi2_feats: Mat, xi2_feats: Mat) -> Mat:
    return rowwise_tensor_product(stage2_design(sol, phi2_feats), np.atleast_2d(xi2_feats))


def stage2_solve_obs(sol: Union[Stage1Sol, Mat], phi2_feats: Mat, xi2_feats: Mat, y: Mat, lambda2: float) -> Mat:
    design = stage2_design_obs(sol, phi2_feats, xi2_feats)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return ridge_solve(design, y, lambda2, design.shape[0])[:, 0]


def stage2_loss_obs(sol: Union[Stage1Sol, Mat], phi2_feats: Mat, xi2_feats: Mat, y: Mat, u: Mat, lambda2: float) -> float:
    design = stage2_design_obs(sol, phi2_feats, xi2_feats)
    residual = np.asarray(y, dtype=np.float64).reshape(-1) - design @ np.asarray(u).reshape(-1)
    return float(np.mean(residual**2) + lambda2 * np.sum(np.asarray(u) ** 2))


class ObsStage2Gradient(NamedTuple):
    grads_x: GradBuffer
    grads_o: GradBuffer | None
    loss: float
    u: Mat


def grad_stage2_obs(
    psi_map: FeatureMap,
    xi_map,
    x1: Mat,
    o2: Mat,
    projector: Stage1Projector,
    phi2_feats: Mat,
    y2: Mat,
    lambda2: float,
    add_intercept: bool = True,
) -> ObsStage2Gradient:
    """
    Gradients of the stage-2 loss with respect to the treatment map and the
    observable map, u at its exact minimizer. ``grads_o`` is None when the
    observable featurizer has no trainable parameters.
    """
    psi1 = with_intercept(forward(psi_map, x1), add_intercept)
    trainable_xi = isinstance(xi_map, FeatureMap)
    xi_raw = forward(xi_map, o2) if trainable_xi else xi_map.transform(o2)
    xi2 = with_intercept(xi_raw, add_intercept)
    y = np.asarray(y2, dtype=np.float64).reshape(-1)
    n = xi2.shape[0]

    predicted = stage2_design(projector.solve(psi1), phi2_feats)
    design = rowwise_tensor_product(predicted, xi2)
    u = ridge_solve(design, y, lambda2, n)[:, 0]
    residual = y - design @ u
    grad_design = (-(2.0 / n) * np.outer(residual, u)).reshape(n, predicted.shape[1], xi2.shape[1])

    grad_predicted = np.einsum("ijk,ik->ij", grad_design, xi2)
    grad_xi = np.einsum("ijk,ij->ik", grad_design, predicted)
    grad_psi1 = projector.P.T @ (np.asarray(phi2_feats).T @ grad_predicted)

    grads_x = backward(psi_map, x1, strip_intercept(grad_psi1, add_intercept))
    grads_o = backward(xi_map, o2, strip_intercept(grad_xi, add_intercept)) if trainable_xi else None
    loss = float(np.mean(residual**2) + lambda2 * np.sum(u**2))
    return ObsStage2Gradient(grads_x=grads_x, grads_o=grads_o, loss=loss, u=u)
