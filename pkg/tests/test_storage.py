import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dfiv.exceptions import InvalidSpecError
from dfiv.models.features import EmptyFeatures, IdentityFeatures, InputScaler, PolynomialFeatures, TabularFeatures
from dfiv.models.iv import Stage1Sol, StructuralModel
from dfiv.models.mdp import Policy
from dfiv.models.rng import RngStream
from dfiv.schemas.datagen import DemandConfig
from dfiv.schemas.experiment import Estimator, RepeatOutcome, RunReport, RunResult, Task
from dfiv.services.datagen_service import demand_generate
from dfiv.services.feature_service import featurize, mlp, rff_map
from dfiv.services.ope_service import generate_transitions, random_mdp
from dfiv.services.prediction_service import predict
from dfiv.storage.checkpoint import (
    featurizer_from_dict,
    featurizer_to_dict,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from dfiv.storage.datasets import read_dataset, read_grid, read_mdp, read_transitions, write_dataset, write_mdp, write_transitions
from dfiv.storage.results import atomic_write, read_jsonl, read_report, write_jsonl, write_report
from dfiv.storage.spec_files import format_spec, parse_spec_text, read_spec_file


def test_model_checkpoint_reproduces_predictions(tmp_path, np_rng):
    psi = mlp([3, 5, 2], RngStream(1, 2))
    psi.scaler = InputScaler(mean=np.array([1.0, 2.0, 3.0]), scale=np.array([0.5, 1.0, 2.0]))
    xi = mlp([2, 3], RngStream(2, 2), last="tanh")
    model = StructuralModel(
        u=np_rng.normal(size=12),
        psi=psi,
        xi=xi,
        y_mean=0.3,
        y_scale=1.7,
        phi=IdentityFeatures(4),
        stage1=Stage1Sol(V=np_rng.normal(size=(3, 5))),
    )
    restored = load_model(save_model(model, tmp_path / "model.json"))
    x, o = np_rng.normal(size=(6, 3)), np_rng.normal(size=(6, 2))
    assert_array_equal(predict(restored, x, o), predict(model, x, o))
    assert_array_equal(restored.stage1.V, model.stage1.V)
    assert restored.tensor_product


@pytest.mark.parametrize(
    "featurizer",
    [
        IdentityFeatures(2),
        EmptyFeatures(2),
        PolynomialFeatures(2, degree=3),
        TabularFeatures(5, n_states=3, n_actions=2),
        rff_map(2, 6, 1.3, RngStream(0, 4)),
    ],
    ids=["identity", "empty", "polynomial", "tabular", "rff"],
)
def test_fixed_featurizers_survive_json(featurizer):
    payload = json.loads(json.dumps(featurizer_to_dict(featurizer)))
    restored = featurizer_from_dict(payload)
    inputs = np.array([[1.0, 0.0, 0.0, 0.0, 1.0]]) if isinstance(featurizer, TabularFeatures) else np.array([[0.2, -1.1]])
    assert type(restored) is type(featurizer)
    assert_array_equal(featurize(restored, inputs), featurize(featurizer, inputs))


def test_checkpoint_rejects_unknown_version_and_kind():
    payload = model_to_dict(StructuralModel(u=np.ones(2), psi=IdentityFeatures(1)))
    payload["format_version"] = 99
    with pytest.raises(InvalidSpecError):
        model_from_dict(payload)
    with pytest.raises(InvalidSpecError):
        featurizer_from_dict({"kind": "spline", "input_dim": 1})


def test_report_round_trip(tmp_path):
    result = RunResult.aggregate(
        [RepeatOutcome(seed=1, metric=0.25, details={"stage1_oos": 0.1}), RepeatOutcome(seed=0, error="boom")],
        task=Task.DEMAND,
        estimator=Estimator.DFIV,
        metric_name="oos_mse",
        rho=0.5,
        lambda1=0.1,
        lambda2=0.1,
    )
    report = RunReport(results=[result])
    assert read_report(write_report(report, tmp_path / "out" / "report.json")) == report
    assert result.seeds == [0, 1]
    assert result.mean == 0.25 and result.standard_error == 0.0


def test_aggregate_mean_and_standard_error():
    result = RunResult.aggregate(
        [RepeatOutcome(seed=s, metric=m) for s, m in enumerate([1.0, 2.0, 3.0])],
        task=Task.DEMAND,
        estimator=Estimator.DFIV,
        metric_name="oos_mse",
        lambda1=0.1,
        lambda2=0.1,
    )
    assert result.mean == pytest.approx(2.0)
    assert result.standard_error == pytest.approx(1.0 / np.sqrt(3.0))
    assert not result.all_failed


def test_atomic_write_rolls_back(tmp_path):
    target = tmp_path / "keep.txt"
    target.write_text("original", encoding="utf-8")
    with pytest.raises(RuntimeError):
        with atomic_write(target) as handle:
            handle.write("partial")
            raise RuntimeError("interrupted")
    assert target.read_text(encoding="utf-8") == "original"
    assert [p.name for p in tmp_path.iterdir()] == ["keep.txt"]


def test_jsonl_round_trip(tmp_path):
    records = [{"iteration": 0, "stage1_loss": 1.5}, {"iteration": 1, "stage1_loss": 0.75, "test_loss": 2.0}]
    assert read_jsonl(write_jsonl(records, tmp_path / "curves.jsonl")) == records


def test_spec_text_parsing():
    text = "# demand run\ntask = demand\n\nrho=0.1, 0.5   # two settings\nrepeats=3\n"
    assert parse_spec_text(text) == {"task": "demand", "rho": "0.1, 0.5", "repeats": "3"}
    assert parse_spec_text(format_spec({"task": "ope", "rho": [0.1, 0.9], "output": None})) == {
        "task": "ope",
        "rho": "0.1,0.9",
    }


@pytest.mark.parametrize("text", ["task demand\n", "=3\n", "seed=1\nseed=2\n"])
def test_spec_text_errors(text):
    with pytest.raises(InvalidSpecError):
        parse_spec_text(text)


def test_missing_spec_file(tmp_path):
    with pytest.raises(InvalidSpecError):
        read_spec_file(tmp_path / "absent.cfg")


def test_dataset_csv_round_trip(tmp_path):
    synthetic = demand_generate(DemandConfig(n_total=30, seed=2))
    written = write_dataset(synthetic, tmp_path / "demand.csv")
    assert written["truth"].name == "demand.truth.csv"
    assert written["grid"].name == "demand.grid.csv"
    restored = read_dataset(written["data"], ["p", "t", "s"], ["c", "t", "s"])
    for name, values in synthetic.dataset.arrays().items():
        assert_allclose(restored.arrays()[name], values, rtol=1e-15, atol=0)
    grid = read_grid(written["grid"], ["p", "t", "s"])
    assert_allclose(grid.truth, synthetic.test_grid.truth, rtol=1e-15)


def test_observable_dataset_round_trip(tmp_path):
    synthetic = demand_generate(DemandConfig(n_total=20, seed=2), observables=True)
    written = write_dataset(synthetic, tmp_path / "obs.csv")
    restored = read_dataset(written["data"], ["p"], ["c"], ["t", "s"])
    assert restored.has_observables
    assert_allclose(restored.stage2_o, synthetic.dataset.stage2_o, rtol=1e-15)


def test_dataset_with_missing_columns_is_rejected(tmp_path):
    written = write_dataset(demand_generate(DemandConfig(n_total=10, seed=0)), tmp_path / "d.csv")
    with pytest.raises(InvalidSpecError):
        read_dataset(written["data"], ["p", "price"], ["c"])


def test_mdp_table_round_trip(tmp_path):
    mdp = random_mdp(3, 2, 0.1, 0.7, seed=4, action_noise=0.3)
    restored = read_mdp(write_mdp(mdp, tmp_path / "mdp.txt"))
    assert_array_equal(restored.transitions, mdp.transitions)
    assert_array_equal(restored.reward_means, mdp.reward_means)
    assert_array_equal(restored.initial, mdp.initial)
    assert (restored.gamma, restored.reward_noise_sd, restored.action_noise) == (0.7, 0.1, 0.3)


def test_transitions_round_trip(tmp_path):
    mdp = random_mdp(3, 2, 0.1, 0.7, seed=4)
    data = generate_transitions(mdp, Policy.uniform(3, 2), 50, seed=1)
    restored = read_transitions(write_transitions(data, tmp_path / "t.csv"), 3, 2, 0.7)
    assert_array_equal(restored.states, data.states)
    assert_array_equal(restored.next_states, data.next_states)
    assert_allclose(restored.rewards, data.rewards, rtol=1e-15)
