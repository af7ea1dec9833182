"""
Seeded experiment runs: data generation, estimator construction, repeats,
optional lambda tuning, the joint-training ablation and dataset export.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from loguru import logger

from dfiv.config.settings import settings
from dfiv.controllers.ope_controller import OpeController
from dfiv.controllers.training_controller import TrainingController
from dfiv.exceptions import DfivError, InvalidSpecError
from dfiv.models.features import (
    Featurizer,
    IdentityFeatures,
    InputScaler,
    PolynomialFeatures,
    TabularFeatures,
)
from dfiv.models.iv import IvDataset, StructuralModel, SyntheticData
from dfiv.models.mdp import MdpSpec, Policy, TransitionDataset
from dfiv.models.rng import RngStream
from dfiv.models.training import TrainingLog
from dfiv.schemas.config import DfivConfig, TuneGrid
from dfiv.schemas.datagen import DemandConfig, HighDimConfig, LinearGaussianConfig
from dfiv.schemas.experiment import Estimator, RepeatOutcome, RunReport, RunResult, RunSpec, Task
from dfiv.services.datagen_service import demand_generate, highdim_generate, linear_gaussian_generate
from dfiv.services.feature_service import fit_scaler, mlp, rff_map
from dfiv.services.ope_service import (
    MDP_STREAM,
    TRANSITION_STREAM,
    exact_q,
    generate_transitions,
    msbe,
    policy_value,
    q_table,
    random_mdp,
)
from dfiv.services.prediction_service import mse, predict
from dfiv.services.tuning_service import oos_stage_losses, tune_lambdas
from dfiv.storage.checkpoint import checkpoint_path, save_model
from dfiv.storage.datasets import write_dataset, write_mdp, write_transitions
from dfiv.storage.results import write_jsonl, write_report

INIT_STREAM = 2

# (psi widths, phi widths) after the input layer
DFIV_WIDTHS = {
    Task.DEMAND: ([64, 32], [128, 64, 32]),
    Task.ABLATION_JOINT: ([64, 32], [128, 64, 32]),
    Task.DEMAND_OBS: ([16, 1], [128, 64, 32]),
    Task.HIGHDIM: ([128, 32], [128, 32]),
    Task.LINEAR_GAUSSIAN: ([16, 8], [16, 8]),
    Task.OPE: ([50, 50], [150, 100, 50]),
}
PSI_LAST = {Task.DEMAND_OBS: "identity", Task.HIGHDIM: "tanh"}


@dataclass
class OpeProblem:
    mdp: MdpSpec
    behavior: Policy
    target: Policy
    transitions: TransitionDataset


@dataclass
class Featurizers:
    psi: Featurizer
    phi: Featurizer
    xi: Optional[Featurizer] = None


# Data -----------------------------------------------------------------------


def iv_data(spec: RunSpec, seed: int, rho: Optional[float]) -> SyntheticData:
    n = spec.sample_size
    if spec.task in (Task.DEMAND, Task.DEMAND_OBS, Task.ABLATION_JOINT):
        cfg = DemandConfig(rho=0.5 if rho is None else rho, n_total=n, seed=seed)
        return demand_generate(cfg, observables=spec.task is Task.DEMAND_OBS)
    if spec.task is Task.LINEAR_GAUSSIAN:
        cfg = LinearGaussianConfig(
            slope=spec.slope, strength=spec.strength, confounding=spec.confounding, n=max(n // 2, 1), seed=seed
        )
        return linear_gaussian_generate(cfg)
    if spec.task is Task.HIGHDIM:
        # the embedding is shared by every repeat of a run
        return highdim_generate(HighDimConfig(treatment_dim=spec.treatment_dim, embedding_seed=spec.seed), n, seed)
    raise InvalidSpecError(f"task {spec.task.value} has no IV dataset")


def target_policy(n_states: int, n_actions: int, seed: int) -> Policy:
    """Row-normalized uniform draws: a stochastic policy away from the uniform behavior."""
    raw = RngStream(seed, MDP_STREAM).split("target").generator.uniform(0.0, 1.0, size=(n_states, n_actions)) + 1e-12
    return Policy(raw / raw.sum(axis=1, keepdims=True))


def ope_problem(spec: RunSpec, seed: int) -> OpeProblem:
    cfg = spec.mdp_config(seed)
    mdp = random_mdp(cfg.n_states, cfg.n_actions, cfg.reward_noise_sd, cfg.gamma, cfg.seed, cfg.action_noise)
    behavior = Policy.uniform(cfg.n_states, cfg.n_actions)
    target = target_policy(cfg.n_states, cfg.n_actions, cfg.seed)
    transitions = generate_transitions(mdp, behavior, cfg.n_transitions, cfg.seed)
    return OpeProblem(mdp=mdp, behavior=behavior, target=target, transitions=transitions)


# Featurizers ----------------------------------------------------------------


def _scaled(featurizer: Featurizer, inputs, standardize: bool) -> Featurizer:
    return fit_scaler(featurizer, inputs) if standardize else featurizer


def _rff(spec: RunSpec, inputs, rng: RngStream):
    scaler = InputScaler.fit(inputs) if spec.standardize else None
    points = scaler.apply(inputs) if scaler is not None else inputs
    featurizer = rff_map(inputs.shape[1], spec.rff_features, spec.rff_bandwidth, rng, points=points)
    featurizer.scaler = scaler
    return featurizer


def build_featurizers(spec: RunSpec, data: IvDataset, seed: int, xi_dims: Optional[List[int]] = None) -> Featurizers:
    """Fresh, seeded featurizers for ``spec.estimator``; scalers are fitted on stage-1 inputs."""
    x, zo = data.stage1_x, data.stage1_instruments()
    rng = RngStream(seed, INIT_STREAM)
    standardize = spec.standardize
    estimator = spec.estimator

    if estimator in (Estimator.DFIV, Estimator.DFIV_OBS):
        psi_widths, phi_widths = DFIV_WIDTHS[spec.task]
        psi_widths = spec.psi_dims or psi_widths
        phi_widths = spec.phi_dims or phi_widths
        psi = mlp([x.shape[1], *psi_widths], rng.split("psi"), last=PSI_LAST.get(spec.task, "relu"))
        phi = mlp([zo.shape[1], *phi_widths], rng.split("phi"))
        built = Featurizers(psi=_scaled(psi, x, standardize), phi=_scaled(phi, zo, standardize))
        if estimator is Estimator.DFIV_OBS:
            o = data.stage1_o
            xi = mlp([o.shape[1], *(xi_dims or [128, 64, 32])], rng.split("xi"))
            built.xi = _scaled(xi, o, standardize)
        return built
    if estimator in (Estimator.LINEAR_2SLS, Estimator.RIDGE):
        return Featurizers(psi=IdentityFeatures(x.shape[1]), phi=IdentityFeatures(zo.shape[1]))
    if estimator is Estimator.SIEVE:
        psi = PolynomialFeatures(x.shape[1], degree=spec.degree)
        phi = PolynomialFeatures(zo.shape[1], degree=spec.degree)
        return Featurizers(psi=_scaled(psi, x, standardize), phi=_scaled(phi, zo, standardize))
    if estimator is Estimator.KIV_RFF:
        return Featurizers(psi=_rff(spec, x, rng.split("psi")), phi=_rff(spec, zo, rng.split("phi")))
    raise InvalidSpecError(f"estimator {estimator.value} does not fit IV data")


def build_ope_featurizers(spec: RunSpec, seed: int) -> Featurizers:
    S, A = spec.n_states, spec.n_actions
    if spec.estimator is Estimator.TABULAR:
        return Featurizers(
            psi=TabularFeatures(S + A, n_states=S, n_actions=A),
            phi=TabularFeatures(S + A, n_states=S, n_actions=A),
        )
    rng = RngStream(seed, INIT_STREAM)
    psi_widths, phi_widths = DFIV_WIDTHS[Task.OPE]
    return Featurizers(
        psi=mlp([S + A, *(spec.psi_dims or psi_widths)], rng.split("psi")),
        phi=mlp([S + A, *(spec.phi_dims or phi_widths)], rng.split("phi")),
    )


# Fitting ----------------------------------------------------------------------


def _config(spec: RunSpec, seed: int, lambdas: Tuple[float, float]) -> DfivConfig:
    if spec.estimator is Estimator.DFIV_OBS:
        return spec.obs_config(seed, lambdas)
    return spec.dfiv_config(seed, lambdas)


def fit_iv(
    spec: RunSpec,
    data: IvDataset,
    cfg: DfivConfig,
    log: Optional[TrainingLog] = None,
) -> StructuralModel:
    """Train ``spec.estimator`` on ``data`` with fresh featurizers seeded by ``cfg.seed``."""
    xi_dims = getattr(cfg, "xi_dims", None)
    maps = build_featurizers(spec, data, cfg.seed, xi_dims)
    estimator = spec.estimator
    if estimator is Estimator.DFIV:
        return TrainingController.train_dfiv(data, maps.psi, maps.phi, cfg, log)
    if estimator is Estimator.DFIV_OBS:
        return TrainingController.train_dfiv_obs(data, maps.psi, maps.phi, maps.xi, cfg, log)
    if estimator is Estimator.RIDGE:
        return TrainingController.ridge_regression(
            data, maps.psi, cfg.lambda2, cfg.add_intercept, cfg.standardize_outcome
        )
    return TrainingController.fixed_feature_2sls(
        data, maps.psi, maps.phi, cfg.lambda1, cfg.lambda2, cfg.add_intercept, cfg.standardize_outcome
    )


def _training_log(synthetic: SyntheticData) -> TrainingLog:
    grid = synthetic.test_grid
    return TrainingLog(test_x=grid.x, test_truth=grid.truth, test_o=grid.o)


def _trainable(spec: RunSpec) -> bool:
    return spec.estimator in (Estimator.DFIV, Estimator.DFIV_OBS)


def _save_checkpoint(spec: RunSpec, model: StructuralModel, seed: int, rho: Optional[float] = None) -> None:
    if spec.output:
        save_model(model, checkpoint_path(spec.output, seed, rho))


def _iv_repeat(spec: RunSpec, seed: int, rho: Optional[float], lambdas: Tuple[float, float]) -> RepeatOutcome:
    synthetic = iv_data(spec, seed, rho)
    data = synthetic.dataset
    log = _training_log(synthetic) if _trainable(spec) else None
    model = fit_iv(spec, data, _config(spec, seed, lambdas), log)
    _save_checkpoint(spec, model, seed, rho)
    grid = synthetic.test_grid
    metric = mse(predict(model, grid.x, grid.o), grid.truth)
    details: Dict[str, Optional[float]] = {}
    if model.stage1 is not None and data.has_joint:
        details["stage1_oos"], details["stage2_oos"] = oos_stage_losses(model, data.joint_stage1(), data.joint_stage2())
    logs = {"training": [record.to_dict() for record in log.records]} if log is not None else {}
    return RepeatOutcome(seed=seed, metric=metric, details=details, logs=logs)


def _ope_repeat(spec: RunSpec, seed: int, lambdas: Tuple[float, float]) -> RepeatOutcome:
    problem = ope_problem(spec, seed)
    maps = build_ope_featurizers(spec, seed)
    cfg = spec.dfiv_config(seed, lambdas)
    log = TrainingLog() if _trainable(spec) else None
    next_actions = RngStream(seed, TRANSITION_STREAM).split("next_action")
    model = OpeController.ope_train(problem.transitions, problem.target, maps.psi, maps.phi, cfg, next_actions, log)
    _save_checkpoint(spec, model, seed)
    details = OpeController.evaluate(model, problem.mdp, problem.target)
    details["msbe"] = msbe(q_table(model, spec.n_states, spec.n_actions), problem.mdp, problem.target)
    logs = {"training": [record.to_dict() for record in log.records]} if log is not None else {}
    return RepeatOutcome(seed=seed, metric=details["value_error"], details=details, logs=logs)


def _guarded(run: Callable[[], RepeatOutcome], seed: int) -> RepeatOutcome:
    try:
        return run()
    except DfivError as exc:
        logger.error("❌ repeat with seed {} failed: {}", seed, exc.detail)
        return RepeatOutcome(seed=seed, error=f"{type(exc).__name__}: {exc.detail}")


def _map_repeats(seeds: List[int], run: Callable[[int], RepeatOutcome], threads: int) -> List[RepeatOutcome]:
    if threads <= 1 or len(seeds) == 1:
        return [_guarded(lambda: run(seed), seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_guarded, lambda seed=seed: run(seed), seed) for seed in seeds]
        return [future.result() for future in futures]


def _config_echo(spec: RunSpec) -> dict:
    return spec.model_dump(mode="json", exclude={"output", "threads"})


class ExperimentController:
    @staticmethod
    def tune(spec: RunSpec, seed: Optional[int] = None, rho: Optional[float] = None) -> Tuple[Tuple[float, float], Dict[str, List[dict]]]:
        """
        Select (lambda1, lambda2) on one generated dataset by out-of-sample
        stage losses, retraining with a reduced epoch budget per candidate.
        """
        if spec.task is Task.OPE:
            raise InvalidSpecError("off-policy evaluation has no held-out stage triples to tune on")
        seed = spec.seed if seed is None else seed
        rho = rho if rho is not None else (spec.rho[0] if spec.uses_rho else None)
        data = iv_data(spec, seed, rho).dataset
        values = spec.lambda_grid or list(settings.LAMBDA_GRID)
        grid = TuneGrid(lambda1=values, lambda2=values)
        scores: Dict[str, List[dict]] = {}
        logger.info("🎯 tuning {} on {} with {} grid points", spec.estimator.value, spec.task.value, len(values))
        lambdas = tune_lambdas(
            data,
            lambda candidate_data, cfg: fit_iv(spec, candidate_data, cfg),
            grid,
            _config(spec, seed, spec.lambdas),
            epoch_fraction=settings.TUNING_EPOCH_FRACTION,
            scores=scores,
        )
        return lambdas, scores

    @staticmethod
    def run_experiment(spec: RunSpec, command: str = "run") -> RunReport:
        """
        One result per rho value (a single result for tasks without rho),
        each aggregating repeats with seeds ``seed .. seed + repeats - 1``.
        Repeat failures are recorded, never raised.
        """
        seeds = [spec.seed + k for k in range(spec.repeats)]
        rhos: List[Optional[float]] = list(spec.rho) if spec.uses_rho else [None]
        metric_name = "policy_value_error" if spec.task is Task.OPE else "oos_mse"
        report = RunReport(command=command)
        shared: Optional[Tuple[Tuple[float, float], Dict[str, List[dict]]]] = None

        logger.info("🚀 {} / {}: {} repeat(s) x {} setting(s)", spec.task.value, spec.estimator.value, len(seeds), len(rhos))
        for rho in rhos:
            lambdas, tuning = spec.lambdas, {}
            if spec.tune:
                if shared is None or not spec.tune_once:
                    shared = ExperimentController.tune(spec, spec.seed, rho)
                lambdas, tuning = shared

            if spec.task is Task.OPE:
                run = partial(_ope_repeat, spec, lambdas=lambdas)
            else:
                run = partial(_iv_repeat, spec, rho=rho, lambdas=lambdas)

            started = time.perf_counter()
            outcomes = _map_repeats(seeds, run, spec.threads)
            result = RunResult.aggregate(
                outcomes,
                task=spec.task,
                estimator=spec.estimator,
                metric_name=metric_name,
                rho=rho,
                lambda1=lambdas[0],
                lambda2=lambdas[1],
                threads=spec.threads,
                wall_time_seconds=time.perf_counter() - started,
                tuning=tuning,
                config=_config_echo(spec),
            )
            logger.info("✅ rho={} mean {}={}", rho, metric_name, result.mean)
            report.results.append(result)

        if spec.output:
            write_report(report, spec.output)
        return report

    @staticmethod
    def tune_report(spec: RunSpec) -> RunReport:
        """The ``tune`` command: a run with tuning forced on."""
        return ExperimentController.run_experiment(spec.model_copy(update={"tune": True}), command="tune")

    @staticmethod
    def ablate(spec: RunSpec) -> RunReport:
        """
        Alternating DFIV against joint training on the same data and
        initialization. The metric is joint training's final test loss;
        both learning curves are kept in the repeat logs.
        """
        if spec.estimator is not Estimator.DFIV or spec.task not in (Task.DEMAND, Task.ABLATION_JOINT, Task.HIGHDIM, Task.LINEAR_GAUSSIAN):
            raise InvalidSpecError("the ablation compares DFIV with joint training on an IV task")
        seeds = [spec.seed + k for k in range(spec.repeats)]
        rhos: List[Optional[float]] = list(spec.rho) if spec.uses_rho else [None]
        lambdas = spec.lambdas
        report = RunReport(command="ablate")

        def run(seed: int, rho: Optional[float]) -> RepeatOutcome:
            synthetic = iv_data(spec, seed, rho)
            data = synthetic.dataset
            cfg = spec.dfiv_config(seed, lambdas)
            dfiv_log = _training_log(synthetic)
            TrainingController.train_dfiv(data, *_fresh_maps(spec, data, seed), cfg, dfiv_log)
            joint_log = TrainingController.ablation_joint_training(
                data, *_fresh_maps(spec, data, seed), cfg, _training_log(synthetic)
            )
            final_joint = _last(joint_log, "test_loss")
            details = {
                "dfiv_test_loss": _last(dfiv_log, "test_loss"),
                "joint_test_loss": final_joint,
                "dfiv_stage1_loss": _last(dfiv_log, "stage1_loss"),
                "joint_stage1_loss": _last(joint_log, "stage1_loss"),
                "joint_diverged": float(joint_log.diverged),
            }
            return RepeatOutcome(
                seed=seed,
                metric=final_joint,
                details=details,
                logs={
                    "dfiv": [record.to_dict() for record in dfiv_log.records],
                    "joint": [record.to_dict() for record in joint_log.records],
                },
            )

        for rho in rhos:
            started = time.perf_counter()
            outcomes = _map_repeats(seeds, lambda seed, rho=rho: run(seed, rho), spec.threads)
            report.results.append(
                RunResult.aggregate(
                    outcomes,
                    task=spec.task,
                    estimator=spec.estimator,
                    metric_name="joint_test_loss",
                    rho=rho,
                    lambda1=lambdas[0],
                    lambda2=lambdas[1],
                    threads=spec.threads,
                    wall_time_seconds=time.perf_counter() - started,
                    config=_config_echo(spec),
                )
            )
        if spec.output:
            write_report(report, spec.output)
            curves = [
                {"rho": result.rho, "seed": repeat.seed, "method": method, **record}
                for result in report.results
                for repeat in result.repeats
                for method, records in repeat.logs.items()
                for record in records
            ]
            write_jsonl(curves, Path(spec.output).with_suffix(".curves.jsonl"))
        return report

    @staticmethod
    def generate(
        task: Task,
        seed: int,
        n: Optional[int],
        out: str,
        rho: float = 0.5,
        overrides: Optional[Dict[str, str]] = None,
    ) -> Dict[str, Path]:
        """
        Write one generated dataset (and its truth and grid files) for ``task``.
        ``overrides`` are run spec keys and take precedence over the arguments.
        """
        estimator = Estimator.TABULAR if task is Task.OPE else Estimator.DFIV_OBS if task is Task.DEMAND_OBS else Estimator.DFIV
        entries: Dict[str, object] = {"task": task, "estimator": estimator, "seed": seed, "n": n, "rho": [rho]}
        entries.update(overrides or {})
        spec = RunSpec.model_validate(entries)
        seed = spec.seed
        if spec.task is Task.OPE:
            problem = ope_problem(spec, seed)
            out_path = Path(out)
            written = {
                "transitions": write_transitions(problem.transitions, out_path),
                "mdp": write_mdp(problem.mdp, out_path.with_name(f"{out_path.stem}.mdp.txt")),
            }
            value = policy_value(exact_q(problem.mdp, problem.target), problem.mdp.initial, problem.target)
            logger.info("💾 OPE data written to {} (target value {:.6f})", out, value)
            return written
        return write_dataset(iv_data(spec, seed, spec.rho[0] if spec.uses_rho else None), out)


def _fresh_maps(spec: RunSpec, data: IvDataset, seed: int) -> Tuple[Featurizer, Featurizer]:
    maps = build_featurizers(spec, data, seed)
    return maps.psi, maps.phi


def _last(log: TrainingLog, key: str) -> Optional[float]:
    values = [value for value in log.curve(key) if value is not None]
    return float(values[-1]) if values else None
