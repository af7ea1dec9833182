import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dfiv.exceptions import DimensionMismatchError, NonFiniteError, SingularSystemError
from dfiv.models.rng import RngStream
from dfiv.services.linalg_service import ridge_solve, sample_gaussian, spd_solve


def test_ridge_solve_scalar_hand_case():
    W = ridge_solve(np.array([[1.0], [1.0]]), np.array([[2.0], [4.0]]), 0.5, 2)
    assert_allclose(W, [[2.0]], atol=1e-12)


def test_ridge_solve_zero_targets_give_zero_weights(np_rng):
    W = ridge_solve(np_rng.normal(size=(10, 3)), np.zeros((10, 2)), 0.1, 10)
    assert_array_equal(W, np.zeros((3, 2)))


def test_ridge_solve_identity_design_returns_targets(np_rng):
    targets = np_rng.normal(size=(4, 2))
    assert_allclose(ridge_solve(np.eye(4), targets, 0.0, 4), targets, atol=1e-12)


def test_ridge_solve_columns_match_single_target_solves(np_rng):
    design = np_rng.normal(size=(30, 5))
    targets = np_rng.normal(size=(30, 3))
    joint = ridge_solve(design, targets, 0.2, 30)
    for column in range(3):
        single = ridge_solve(design, targets[:, column], 0.2, 30)
        assert_allclose(joint[:, column], single[:, 0], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ridge_solve_norm_shrinks_as_penalty_grows(seed):
    rng = np.random.default_rng(seed)
    design = rng.normal(size=(40, 6))
    targets = rng.normal(size=(40, 2))
    norms = [np.linalg.norm(ridge_solve(design, targets, reg, 40)) for reg in (0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0)]
    assert all(later <= earlier * (1.0 + 1e-12) for earlier, later in zip(norms, norms[1:]))


def test_ridge_solve_rejects_row_mismatch():
    with pytest.raises(DimensionMismatchError):
        ridge_solve(np.ones((3, 2)), np.ones((4, 1)), 0.1, 3)


def test_spd_solve_hand_cases():
    B = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert_allclose(spd_solve(np.eye(2), B), B)
    assert_allclose(spd_solve(np.array([[4.0]]), np.array([[12.0]])), [[3.0]])
    assert_allclose(spd_solve(np.diag([2.0, 5.0]), np.array([[2.0], [10.0]])), [[1.0], [2.0]])


@pytest.mark.parametrize("condition", [1.0, 1e3, 1e6])
def test_spd_solve_recovers_known_solution(condition):
    rng = np.random.default_rng(11)
    Q, _ = np.linalg.qr(rng.normal(size=(20, 20)))
    A = Q @ np.diag(np.geomspace(1.0, 1.0 / condition, 20)) @ Q.T
    A = 0.5 * (A + A.T)
    X0 = rng.normal(size=(20, 3))
    X = spd_solve(A, A @ X0)
    assert np.linalg.norm(X - X0) / np.linalg.norm(X0) <= 1e-8


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_matrix_products_associate(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (rng.normal(size=(10, 10)) for _ in range(3))
    left, right = (A @ B) @ C, A @ (B @ C)
    assert np.linalg.norm(left - right) <= 1e-10 * np.linalg.norm(left)


def test_spd_solve_vector_rhs_keeps_shape_and_reports_residual():
    X, residual = spd_solve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]), return_residual=True)
    assert X.shape == (2,)
    assert_allclose(X, [1.0, 2.0])
    assert residual < 1e-12


def test_spd_solve_recovers_with_jitter_on_singular_psd():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    B = np.array([[2.0], [2.0]])
    X = spd_solve(A, B)
    assert_allclose(A @ X, B, atol=1e-6)


def test_spd_solve_reports_indefinite_system():
    with pytest.raises(SingularSystemError):
        spd_solve(-np.eye(2), np.ones((2, 1)))


def test_spd_solve_rejects_bad_input():
    with pytest.raises(NonFiniteError):
        spd_solve(np.array([[1.0, 0.0], [0.0, np.nan]]), np.ones((2, 1)))
    with pytest.raises(DimensionMismatchError):
        spd_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones((2, 1)))
    with pytest.raises(DimensionMismatchError):
        spd_solve(np.eye(2), np.ones((3, 1)))


def test_sample_gaussian_degenerate_and_deterministic():
    assert_array_equal(sample_gaussian(RngStream(1, 1), 7.0, 0.0, 3), [7.0, 7.0, 7.0])
    first = sample_gaussian(RngStream(42, 3), 0.0, 1.0, 50)
    second = sample_gaussian(RngStream(42, 3), 0.0, 1.0, 50)
    assert_array_equal(first, second)
    with pytest.raises(ValueError):
        sample_gaussian(RngStream(1, 1), 0.0, -1.0, 3)


def test_sample_gaussian_moments():
    draws = sample_gaussian(RngStream(5, 8), 0.0, 1.0, 100_000)
    assert abs(draws.mean()) < 0.02
    assert abs(draws.std() - 1.0) < 0.02
