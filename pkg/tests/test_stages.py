import time

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import finite_difference, relative_error
from dfiv.controllers.training_controller import TrainingController
from dfiv.exceptions import DimensionMismatchError
from dfiv.models.features import FeatureMap, IdentityFeatures
from dfiv.models.iv import IvDataset, Stage1Sol, StructuralModel
from dfiv.services.feature_service import forward, with_intercept
from dfiv.services.linalg_service import ridge_solve
from dfiv.services.prediction_service import instrument_prediction, predict
from dfiv.services.stage_service import (
    Stage1Projector,
    grad_stage1_thetaZ,
    grad_stage2_thetaX,
    stage1_loss,
    stage1_solve,
    stage2_loss,
    stage2_solve,
)

# hand-solved scalar cases


def test_stage1_solve_scalar_cases():
    assert_allclose(stage1_solve(np.array([[3.0]]), np.array([[2.0]]), 0.0).V, [[1.5]], atol=1e-10)
    assert_allclose(stage1_solve(np.array([[1.0, 0.0]]), np.array([[2.0]]), 1.0).V, [[0.4], [0.0]], atol=1e-10)


def test_stage1_loss_scalar_cases():
    psi, phi, V = np.array([[3.0]]), np.array([[2.0]]), np.array([[1.0]])
    assert stage1_loss(psi, phi, V, 0.0) == pytest.approx(1.0, abs=1e-10)
    assert stage1_loss(psi, phi, V, 0.5) == pytest.approx(1.5, abs=1e-10)


def test_stage1_loss_zero_on_exact_fit(np_rng):
    phi = np_rng.normal(size=(10, 3))
    V = np_rng.normal(size=(2, 3))
    assert stage1_loss(phi @ V.T, phi, V, 0.0) == pytest.approx(0.0, abs=1e-20)


def test_stage2_solve_scalar_cases():
    V, phi2, y = np.array([[1.0]]), np.array([[2.0]]), np.array([6.0])
    assert_allclose(stage2_solve(V, phi2, y, 0.0), [3.0], atol=1e-10)
    assert_allclose(stage2_solve(V, phi2, y, 1.0), [2.4], atol=1e-10)
    assert_allclose(stage2_solve(V, phi2, np.zeros(1), 1.0), [0.0])


def test_stage2_loss_scalar_cases(np_rng):
    V, phi2, y = np.array([[1.0]]), np.array([[2.0]]), np.array([6.0])
    assert stage2_loss(V, phi2, y, np.array([3.0]), 0.0) == pytest.approx(0.0, abs=1e-10)
    assert stage2_loss(V, phi2, y, np.array([2.0]), 1.0) == pytest.approx(8.0, abs=1e-10)
    targets = np_rng.normal(size=7)
    feats = np_rng.normal(size=(7, 2))
    assert stage2_loss(np.eye(2), feats, targets, np.zeros(2), 3.0) == pytest.approx(np.mean(targets**2))


def test_stage_shapes_are_checked():
    with pytest.raises(DimensionMismatchError):
        stage1_solve(np.ones((3, 2)), np.ones((4, 2)), 0.1)
    with pytest.raises(DimensionMismatchError):
        stage2_solve(np.ones((2, 3)), np.ones((4, 2)), np.ones(4), 0.1)


# exact minimizers


def test_stage1_solution_is_the_argmin(np_rng):
    psi, phi, lam = np_rng.normal(size=(30, 3)), np_rng.normal(size=(30, 4)), 0.05
    V = stage1_solve(psi, phi, lam).V
    best = stage1_loss(psi, phi, V, lam)
    for _ in range(100):
        direction = np_rng.normal(size=V.shape)
        direction /= np.linalg.norm(direction)
        assert stage1_loss(psi, phi, V + 1e-3 * direction, lam) >= best - 1e-12


def test_stage2_solution_is_the_argmin(np_rng):
    V = np_rng.normal(size=(3, 4))
    phi2, y, lam = np_rng.normal(size=(25, 4)), np_rng.normal(size=25), 0.05
    u = stage2_solve(V, phi2, y, lam)
    best = stage2_loss(V, phi2, y, u, lam)
    for _ in range(100):
        direction = np_rng.normal(size=u.shape)
        direction /= np.linalg.norm(direction)
        assert stage2_loss(V, phi2, y, u + 1e-3 * direction, lam) >= best - 1e-12


def test_heavy_regularization_shrinks_stage1(np_rng):
    psi, phi = np_rng.normal(size=(20, 3)), np_rng.normal(size=(20, 4))
    V = stage1_solve(psi, phi, 1e9).V
    assert np.linalg.norm(V) <= 1e-6 * np.linalg.norm(psi.T @ phi)


def test_stage1_solve_wide_instrument_features_is_fast(np_rng):
    psi = np_rng.normal(size=(2000, 32))
    phi = np_rng.normal(size=(2000, 400))
    started = time.perf_counter()
    sol = stage1_solve(psi, phi, 0.1)
    assert time.perf_counter() - started < 2.0
    assert sol.V.shape == (32, 400)


def test_projector_matches_direct_solve(np_rng):
    psi, phi = np_rng.normal(size=(15, 3)), np_rng.normal(size=(15, 5))
    projected = Stage1Projector(phi, 0.2).solve(psi).V
    assert_allclose(projected, stage1_solve(psi, phi, 0.2).V, rtol=1e-10, atol=1e-12)


# predictions


def test_predict_scalar_models():
    identity = IdentityFeatures(1)
    zero = StructuralModel(u=np.zeros(1), psi=identity, add_intercept=False)
    assert_allclose(predict(zero, np.array([[1.0], [-4.0]])), [0.0, 0.0])
    doubling = StructuralModel(u=np.array([2.0]), psi=identity, add_intercept=False)
    assert_allclose(predict(doubling, np.array([[1.5], [-4.0]])), [3.0, -8.0])


def test_instrument_prediction_chains_both_stages():
    model = StructuralModel(
        u=stage2_solve(np.array([[1.0]]), np.array([[2.0]]), np.array([6.0]), 0.0),
        psi=IdentityFeatures(1),
        add_intercept=False,
        phi=IdentityFeatures(1),
        stage1=Stage1Sol(V=np.array([[1.0]])),
    )
    assert_allclose(instrument_prediction(model, np.array([[2.0]])), [6.0], atol=1e-10)


# gradients


def _stage1_value(psi_feats, z, lam):
    def loss(net):
        phi = with_intercept(forward(net, z))
        return stage1_loss(psi_feats, phi, stage1_solve(psi_feats, phi, lam), lam)

    return loss


def test_stage1_gradient_matches_finite_differences(tanh_net, np_rng):
    phi_map = tanh_net([2, 4, 3], seed=11)
    z = np_rng.normal(size=(12, 2))
    psi_feats = np_rng.normal(size=(12, 3))
    analytic = grad_stage1_thetaZ(psi_feats, phi_map, z, 0.1).grads.flat()
    numeric = finite_difference(phi_map, _stage1_value(psi_feats, z, 0.1))
    assert relative_error(analytic, numeric) <= 1e-5


def test_stage1_envelope_equals_full_solve_gradient(tanh_net, np_rng):
    phi_map = tanh_net([3, 6, 4], seed=3)
    z = np_rng.normal(size=(20, 3))
    psi_feats = np_rng.normal(size=(20, 5))
    envelope = grad_stage1_thetaZ(psi_feats, phi_map, z, 0.05, mode="envelope")
    full = grad_stage1_thetaZ(psi_feats, phi_map, z, 0.05, mode="full")
    assert relative_error(envelope.grads.flat(), full.grads.flat()) <= 1e-6
    assert envelope.loss == pytest.approx(full.loss)


def test_stage1_gradient_rejects_unknown_mode(tanh_net, np_rng):
    with pytest.raises(ValueError):
        grad_stage1_thetaZ(np.ones((4, 1)), tanh_net([1, 2]), np_rng.normal(size=(4, 1)), 0.1, mode="adjoint")


def test_stage1_gradient_vanishes_on_exact_fit(tanh_net, np_rng):
    phi_map = tanh_net([2, 3], seed=5)
    z = np_rng.normal(size=(20, 2))
    psi_feats = with_intercept(forward(phi_map, z)) @ np_rng.normal(size=(4, 2))
    step = grad_stage1_thetaZ(psi_feats, phi_map, z, 0.0)
    assert step.loss == pytest.approx(0.0, abs=1e-12)
    assert step.grads.norm() < 1e-8


def _stage2_value(x1, projector, phi2, y, lam):
    def loss(net):
        sol = projector.solve(with_intercept(forward(net, x1)))
        return stage2_loss(sol, phi2, y, stage2_solve(sol, phi2, y, lam), lam)

    return loss


def test_stage2_gradient_matches_finite_differences(tanh_net, np_rng):
    psi_map = tanh_net([2, 4, 3], seed=13)
    x1 = np_rng.normal(size=(12, 2))
    phi1 = np_rng.normal(size=(12, 4))
    phi2 = np_rng.normal(size=(10, 4))
    y = np_rng.normal(size=10)
    projector = Stage1Projector(phi1, 0.1)
    analytic = grad_stage2_thetaX(psi_map, x1, projector, phi2, y, 0.1).grads.flat()
    numeric = finite_difference(psi_map, _stage2_value(x1, projector, phi2, y, 0.1))
    assert relative_error(analytic, numeric) <= 1e-5


def test_stage2_gradient_two_point_linear_hand_case():
    # psi(x) = w x + b at w=1, b=0; V = mean(psi1) = 2, u = V ybar / (V^2 + lambda2) = 0.8,
    # loss = mean(y^2) - V^2 ybar^2 / (V^2 + lambda2) = 1.8 and dL/dV = -0.64
    psi_map = FeatureMap(layer_dims=[1, 1], weights=[np.array([[1.0]])], biases=[np.array([0.0])], activations=["identity"])
    projector = Stage1Projector(np.ones((2, 1)), 0.0)
    step = grad_stage2_thetaX(
        psi_map, np.array([[1.0], [3.0]]), projector, np.ones((2, 1)), np.array([1.0, 3.0]), 1.0, add_intercept=False
    )
    assert_allclose(step.V, [[2.0]], atol=1e-12)
    assert_allclose(step.u, [0.8], atol=1e-12)
    assert step.loss == pytest.approx(1.8, abs=1e-12)
    assert_allclose(step.grads.weights[0], [[-1.28]], atol=1e-12)
    assert_allclose(step.grads.biases[0], [-0.64], atol=1e-12)


def test_stage2_gradient_is_zero_for_zero_targets(tanh_net, np_rng):
    psi_map = tanh_net([2, 3], seed=2)
    x1 = np_rng.normal(size=(8, 2))
    projector = Stage1Projector(np_rng.normal(size=(8, 3)), 0.1)
    step = grad_stage2_thetaX(psi_map, x1, projector, np_rng.normal(size=(6, 3)), np.zeros(6), 0.1)
    assert_allclose(step.u, np.zeros(4))
    assert step.grads.norm() == 0.0


# closed-form 2SLS


def _linear_data(np_rng, n=200):
    z = np_rng.normal(size=(2 * n, 1))
    x = z + np_rng.normal(size=(2 * n, 1))
    y = 2.0 * x[:, 0] + np_rng.normal(size=2 * n)
    return x, y, z


def test_2sls_with_instrument_equal_to_treatment_is_ridge(np_rng):
    x, y, _ = _linear_data(np_rng)
    data = IvDataset(stage1_x=x[:200], stage1_z=x[:200], stage2_y=y[200:], stage2_z=x[200:])
    model = TrainingController.fixed_feature_2sls(data, IdentityFeatures(1), IdentityFeatures(1), 0.0, 0.1)
    direct = ridge_solve(with_intercept(x[200:]), y[200:], 0.1, 200)[:, 0]
    grid = np.linspace(-3.0, 3.0, 13)[:, None]
    assert_allclose(predict(model, grid), with_intercept(grid) @ direct, atol=1e-8)


def test_2sls_heavy_stage2_regularization_predicts_zero(np_rng):
    x, y, z = _linear_data(np_rng)
    data = IvDataset(stage1_x=x[:200], stage1_z=z[:200], stage2_y=y[200:], stage2_z=z[200:])
    model = TrainingController.fixed_feature_2sls(data, IdentityFeatures(1), IdentityFeatures(1), 0.1, 1e9)
    assert np.max(np.abs(predict(model, np.linspace(-3.0, 3.0, 13)[:, None]))) < 1e-6
