import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import finite_difference, relative_error
from dfiv.exceptions import DimensionMismatchError, NonFiniteError
from dfiv.models.features import (
    AdamState,
    FeatureMap,
    GradBuffer,
    IdentityFeatures,
    InputScaler,
    PolynomialFeatures,
    TabularFeatures,
)
from dfiv.models.rng import RngStream
from dfiv.services.feature_service import (
    adam_step,
    backward,
    forward,
    init_params,
    median_heuristic,
    rff_map,
    with_intercept,
)
from dfiv.services.ope_service import encode_state_actions


def _single_layer(activation: str) -> FeatureMap:
    return FeatureMap(
        layer_dims=[2, 1],
        weights=[np.array([[1.0, 2.0]])],
        biases=[np.array([0.5])],
        activations=[activation],
    )


def test_forward_relu_layer():
    fm = _single_layer("relu")
    assert_allclose(forward(fm, np.array([[1.0, 1.0], [-3.0, 0.0]])), [[3.5], [0.0]])


def test_forward_two_layers_identity():
    fm = FeatureMap(
        layer_dims=[1, 2, 1],
        weights=[np.array([[1.0], [-1.0]]), np.array([[1.0, 1.0]])],
        biases=[np.zeros(2), np.array([1.0])],
        activations=["relu", "identity"],
    )
    # relu(x) + relu(-x) + 1 = |x| + 1
    assert_allclose(forward(fm, np.array([[2.0], [-3.0], [0.0]])), [[3.0], [4.0], [1.0]])


def test_forward_commutes_with_row_permutations(tanh_net, np_rng):
    fm = tanh_net([3, 5, 2], seed=4)
    X = np_rng.normal(size=(9, 3))
    order = np_rng.permutation(9)
    assert_allclose(forward(fm, X[order]), forward(fm, X)[order], rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    with pytest.raises(DimensionMismatchError):
        forward(_single_layer("relu"), np.ones((4, 3)))


def test_backward_linear_layer_is_upstream_times_inputs(np_rng):
    fm = FeatureMap(
        layer_dims=[3, 2],
        weights=[np_rng.normal(size=(2, 3))],
        biases=[np.zeros(2)],
        activations=["identity"],
    )
    X = np_rng.normal(size=(5, 3))
    U = np_rng.normal(size=(5, 2))
    grads = backward(fm, X, U)
    assert_allclose(grads.weights[0], U.T @ X)
    assert_allclose(grads.biases[0], U.sum(axis=0))


def test_backward_accumulates_into_buffer(np_rng):
    fm = _single_layer("identity")
    X, U = np_rng.normal(size=(4, 2)), np_rng.normal(size=(4, 1))
    once = backward(fm, X, U)
    twice = backward(fm, X, U, into=backward(fm, X, U))
    assert_allclose(twice.flat(), 2.0 * once.flat())


def test_backward_matches_finite_differences(tanh_net, np_rng):
    fm = tanh_net([3, 5, 4])
    X = np_rng.normal(size=(6, 3))
    U = np_rng.normal(size=(6, 4))
    analytic = backward(fm, X, U).flat()
    numeric = finite_difference(fm, lambda net: float(np.sum(U * forward(net, X))))
    assert relative_error(analytic, numeric) < 1e-6


def test_adam_first_step_moves_by_learning_rate():
    fm = _single_layer("identity")
    grads = GradBuffer(weights=[np.array([[2.0, -0.5]])], biases=[np.array([0.0])])
    updated, state = adam_step(fm, grads, AdamState.fresh(fm), lr=0.01)
    assert state.step == 1
    assert_allclose(updated.weights[0], [[1.0 - 0.01, 2.0 + 0.01]], atol=1e-8)
    assert_array_equal(updated.biases[0], fm.biases[0])
    # inputs are never mutated
    assert_array_equal(fm.weights[0], [[1.0, 2.0]])


def test_adam_zero_gradient_and_zero_rate_are_no_ops():
    fm = _single_layer("relu")
    zero = GradBuffer.zeros_like(fm)
    updated, state = adam_step(fm, zero, AdamState.fresh(fm), lr=0.1)
    assert_array_equal(updated.weights[0], fm.weights[0])
    grads = GradBuffer(weights=[np.ones((1, 2))], biases=[np.ones(1)])
    updated, _ = adam_step(fm, grads, state, lr=0.0)
    assert_array_equal(updated.weights[0], fm.weights[0])


def test_adam_rejects_bad_gradients():
    fm = _single_layer("relu")
    bad = GradBuffer(weights=[np.array([[np.nan, 0.0]])], biases=[np.zeros(1)])
    with pytest.raises(NonFiniteError):
        adam_step(fm, bad, AdamState.fresh(fm), lr=0.1)
    wrong = GradBuffer(weights=[np.zeros((2, 2))], biases=[np.zeros(2)])
    with pytest.raises(DimensionMismatchError):
        adam_step(fm, wrong, AdamState.fresh(fm), lr=0.1)


def test_init_params_glorot_variance_and_zero_bias():
    fm = init_params([256, 256], ["relu"], RngStream(0, 2))
    expected = (6.0 / 512.0) / 3.0
    assert abs(fm.weights[0].var() - expected) < 0.2 * expected
    assert_array_equal(fm.biases[0], np.zeros(256))


def test_init_params_is_seeded():
    a = init_params([4, 3, 2], ["relu", "relu"], RngStream(8, 2))
    b = init_params([4, 3, 2], ["relu", "relu"], RngStream(8, 2))
    assert_array_equal(GradBuffer(a.weights, a.biases).flat(), GradBuffer(b.weights, b.biases).flat())


def test_rff_norm_and_kernel_approximation(np_rng):
    rff = rff_map(2, 2000, 1.0, RngStream(3, 7))
    points = np_rng.normal(size=(40, 2))
    z = rff.transform(points)
    assert abs(np.mean(np.sum(z**2, axis=1)) - 1.0) < 0.05
    errors = []
    for i in range(20):
        a, b = points[2 * i], points[2 * i + 1]
        kernel = np.exp(-np.sum((a - b) ** 2) / 2.0)
        errors.append(abs(float(z[2 * i] @ z[2 * i + 1]) - kernel))
    assert np.mean(errors) <= 0.05


def test_rff_rejects_odd_feature_count():
    with pytest.raises(ValueError):
        rff_map(2, 3, 1.0, RngStream(0, 0))


def test_rff_median_bandwidth_needs_points():
    with pytest.raises(ValueError):
        rff_map(1, 4, "median", RngStream(0, 0))
    assert rff_map(1, 4, "median", RngStream(0, 0), points=np.array([[0.0], [3.0]])).bandwidth == 3.0


def test_median_heuristic_hand_cases():
    assert median_heuristic(np.array([[0.0], [3.0]])) == 3.0
    assert median_heuristic(np.array([0.0, 1.0, 3.0])) == 2.0


def test_median_heuristic_scales_with_data(np_rng):
    points = np_rng.normal(size=(50, 3))
    assert median_heuristic(5.0 * points) == pytest.approx(5.0 * median_heuristic(points))


def test_median_heuristic_rejects_identical_points():
    with pytest.raises(ValueError):
        median_heuristic(np.ones((5, 2)))


def test_polynomial_degree_two():
    poly = PolynomialFeatures(2, degree=2)
    assert poly.output_dim == 5
    assert_allclose(poly.transform(np.array([[2.0, 3.0]])), [[2.0, 3.0, 4.0, 6.0, 9.0]])


def test_tabular_index_is_state_times_actions_plus_action():
    tab = TabularFeatures(5, n_states=3, n_actions=2)
    inputs = encode_state_actions(np.array([0, 2, 1]), np.array([1, 0, 1]), 3, 2)
    feats = tab.transform(inputs)
    assert_array_equal(np.argmax(feats, axis=1), [1, 4, 3])
    assert_array_equal(feats.sum(axis=1), [1.0, 1.0, 1.0])


def test_input_scaler_standardizes_and_keeps_constant_columns(np_rng):
    inputs = np.column_stack([np_rng.normal(3.0, 2.0, size=100), np.full(100, 7.0)])
    scaler = InputScaler.fit(inputs)
    scaled = scaler.apply(inputs)
    assert_allclose(scaled[:, 0].mean(), 0.0, atol=1e-12)
    assert_allclose(scaled[:, 0].std(), 1.0)
    assert_array_equal(scaled[:, 1], np.zeros(100))
    identity = IdentityFeatures(2, scaler=scaler)
    assert_allclose(identity.transform(inputs), scaled)


def test_with_intercept_appends_ones():
    assert_array_equal(with_intercept(np.zeros((2, 1))), [[0.0, 1.0], [0.0, 1.0]])
    assert with_intercept(np.zeros((2, 1)), add_intercept=False).shape == (2, 1)
