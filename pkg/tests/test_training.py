import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dfiv.controllers.training_controller import TrainingController, check_losses, sample_batch
from dfiv.exceptions import DivergenceError, InvalidSpecError, MissingDataError
from dfiv.models.features import IdentityFeatures
from dfiv.models.rng import RngStream
from dfiv.models.training import TrainingLog
from dfiv.schemas.config import DfivConfig
from dfiv.schemas.datagen import DemandConfig, LinearGaussianConfig
from dfiv.services.datagen_service import demand_generate, linear_gaussian_generate
from dfiv.services.feature_service import fit_scaler, mlp
from dfiv.services.prediction_service import predict


def _maps(data, seed=0):
    rng = RngStream(seed, 2)
    psi = fit_scaler(mlp([data.stage1_x.shape[1], 8, 4], rng.split("psi")), data.stage1_x)
    phi = fit_scaler(mlp([data.stage1_z.shape[1], 8, 4], rng.split("phi")), data.stage1_z)
    return psi, phi


@pytest.fixture
def demand_small():
    return demand_generate(DemandConfig(rho=0.5, n_total=200, seed=3))


def test_sample_batch_full_and_partial():
    assert_array_equal(sample_batch(RngStream(0, 1), 5, 10), np.arange(5))
    batch = sample_batch(RngStream(0, 1), 100, 10)
    assert len(batch) == 10 and len(set(batch.tolist())) == 10
    assert np.all(np.diff(batch) > 0)
    assert_array_equal(batch, sample_batch(RngStream(0, 1), 100, 10))


def test_check_losses_flags_divergence():
    check_losses(0, 1.0, 2.0)
    with pytest.raises(DivergenceError) as info:
        check_losses(4, 1.0, float("nan"))
    assert info.value.iteration == 4
    with pytest.raises(DivergenceError):
        check_losses(0, 1e13)


def test_batch_sizes_larger_than_data_are_rejected():
    with pytest.raises(InvalidSpecError):
        DfivConfig(batch_m=50).resolve_batches(10, 10)


def test_zero_epochs_is_fixed_feature_2sls(demand_small):
    data = demand_small.dataset
    psi, phi = _maps(data)
    cfg = DfivConfig(epochs=0, lambda1=0.1, lambda2=0.1)
    trained = TrainingController.train_dfiv(data, psi, phi, cfg)
    closed = TrainingController.fixed_feature_2sls(data, psi, phi, 0.1, 0.1)
    assert_allclose(trained.u, closed.u)
    assert_allclose(trained.stage1.V, closed.stage1.V)


def test_training_is_deterministic(demand_small):
    data = demand_small.dataset
    cfg = DfivConfig(epochs=3, inner_stage1=2, batch_m=50, batch_n=50, seed=9, standardize_outcome=True)
    first = TrainingController.train_dfiv(data, *_maps(data), cfg)
    second = TrainingController.train_dfiv(data, *_maps(data), cfg)
    assert_array_equal(first.u, second.u)
    for a, b in zip(first.psi.parameters(), second.psi.parameters()):
        assert_array_equal(a, b)
    grid = demand_small.test_grid
    assert_array_equal(predict(first, grid.x), predict(second, grid.x))


def test_training_log_tracks_test_and_out_of_sample_losses(demand_small):
    data = demand_small.dataset
    grid = demand_small.test_grid
    log = TrainingLog(test_x=grid.x, test_truth=grid.truth)
    TrainingController.train_dfiv(data, *_maps(data), DfivConfig(epochs=4, inner_stage1=1), log)
    assert len(log) == 4
    assert [record.iteration for record in log.records] == [0, 1, 2, 3]
    assert all(record.test_loss is not None and record.test_loss >= 0 for record in log.records)
    assert all(record.stage1_oos is not None and record.stage2_oos is not None for record in log.records)


def test_ridge_regression_needs_joint_rows(demand_small):
    data = demand_small.dataset
    data.stage1_y = None
    with pytest.raises(MissingDataError):
        TrainingController.ridge_regression(data, IdentityFeatures(3), 0.1)


def test_joint_training_records_one_entry_per_iteration(demand_small):
    data = demand_small.dataset
    grid = demand_small.test_grid
    log = TrainingController.ablation_joint_training(
        data, *_maps(data), DfivConfig(epochs=5, lr=1e-4), TrainingLog(test_x=grid.x, test_truth=grid.truth)
    )
    assert len(log) == 5
    assert not log.diverged
    assert all(value is not None for value in log.curve("test_loss"))


def test_linear_2sls_recovers_slope_where_ols_is_biased():
    synthetic = linear_gaussian_generate(LinearGaussianConfig(slope=2.0, strength=1.0, confounding=0.8, n=10_000, seed=1))
    data = synthetic.dataset
    iv = TrainingController.fixed_feature_2sls(data, IdentityFeatures(1), IdentityFeatures(1), 1e-6, 1e-6)
    ols = TrainingController.ridge_regression(data, IdentityFeatures(1), 1e-6)
    points = np.array([[0.0], [1.0]])
    iv_slope = float(np.diff(predict(iv, points))[0])
    ols_slope = float(np.diff(predict(ols, points))[0])
    assert abs(iv_slope - 2.0) <= 0.05
    assert abs(ols_slope - 2.4) <= 0.05
    assert ols_slope - 2.0 >= 0.3


def _iv_slope_error(n: int, seed: int) -> float:
    data = linear_gaussian_generate(LinearGaussianConfig(n=n, seed=seed)).dataset
    model = TrainingController.fixed_feature_2sls(data, IdentityFeatures(1), IdentityFeatures(1), 1e-6, 1e-6)
    return abs(float(np.diff(predict(model, np.array([[0.0], [1.0]])))[0]) - 2.0)


def test_linear_2sls_error_shrinks_with_sample_size():
    medians = [np.median([_iv_slope_error(n, seed) for seed in range(10)]) for n in (100, 1_000, 10_000)]
    assert medians[0] > medians[1] > medians[2]
