"""
Estimator training: the alternating DFIV loop, its observable-confounder
variant, the joint-training ablation and the closed-form baselines.
"""
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from dfiv.config.settings import settings
from dfiv.exceptions import DfivError, DivergenceError, MissingDataError
from dfiv.models.features import FeatureMap, Featurizer, Mat
from dfiv.models.iv import IvDataset, StructuralModel
from dfiv.models.rng import RngStream
from dfiv.models.training import IterationRecord, TrainingLog
from dfiv.schemas.config import DfivConfig, ObsConfig
from dfiv.services.confounded_service import grad_stage2_obs, stage2_loss_obs, stage2_solve_obs
from dfiv.services.feature_service import adam_step, featurize, fresh_adam, with_intercept
from dfiv.services.linalg_service import ridge_solve
from dfiv.services.prediction_service import mse, predict
from dfiv.services.stage_service import (
    Stage1Projector,
    grad_joint,
    grad_stage1_thetaZ,
    grad_stage2_thetaX,
    stage1_loss,
    stage1_solve,
    stage2_loss,
    stage2_solve,
)
from dfiv.services.tuning_service import oos_stage_losses

BATCH_STREAM = 1


def _outcome(y: Mat, standardize: bool) -> Tuple[Mat, float, float]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not standardize:
        return y, 0.0, 1.0
    mean = float(y.mean())
    scale = float(y.std()) or 1.0
    return (y - mean) / scale, mean, scale


def sample_batch(rng: RngStream, size: int, batch: int) -> Mat:
    if batch >= size:
        return np.arange(size)
    return np.sort(rng.generator.choice(size, size=batch, replace=False))


def check_losses(iteration: int, *losses: float) -> None:
    for loss in losses:
        if not np.isfinite(loss) or loss > settings.DIVERGENCE_THRESHOLD:
            raise DivergenceError(f"loss {loss:.3e} at iteration {iteration} exceeds the divergence threshold", iteration)


def _closed_form_model(
    data: IvDataset,
    psi: Featurizer,
    phi: Featurizer,
    lambda1: float,
    lambda2: float,
    add_intercept: bool = True,
    standardize_outcome: bool = False,
    xi: Optional[Featurizer] = None,
) -> StructuralModel:
    psi1 = with_intercept(featurize(psi, data.stage1_x), add_intercept)
    phi1 = with_intercept(featurize(phi, data.stage1_instruments()), add_intercept)
    phi2 = with_intercept(featurize(phi, data.stage2_instruments()), add_intercept)
    y, y_mean, y_scale = _outcome(data.stage2_y, standardize_outcome)
    sol = stage1_solve(psi1, phi1, lambda1)
    if xi is None:
        u = stage2_solve(sol, phi2, y, lambda2)
    else:
        if data.stage2_o is None:
            raise MissingDataError("observable features need observables in the data")
        xi2 = with_intercept(featurize(xi, data.stage2_o), add_intercept)
        u = stage2_solve_obs(sol, phi2, xi2, y, lambda2)
    return StructuralModel(
        u=u,
        psi=psi,
        xi=xi,
        add_intercept=add_intercept,
        y_mean=y_mean,
        y_scale=y_scale,
        phi=phi,
        stage1=sol,
    )


class _Monitor:
    """Per-iteration bookkeeping shared by the training loops."""

    def __init__(self, data: IvDataset, cfg: DfivConfig, log: Optional[TrainingLog]):
        self.data = data
        self.cfg = cfg
        self.log = log
        self.patience = cfg.early_stop_patience if data.has_joint else None
        self.best = np.inf
        self.stale = 0

    @property
    def needs_model(self) -> bool:
        return self.patience is not None or (self.log is not None and (self.data.has_joint or self.log.tracks_test_loss))

    def observe(self, iteration: int, l1: float, l2: float, model_fn) -> bool:
        """Record an iteration; returns True when training should stop early."""
        check_losses(iteration, l1, l2)
        record = IterationRecord(iteration=iteration, stage1_loss=l1, stage2_loss=l2)
        if self.needs_model:
            model = model_fn()
            if self.data.has_joint:
                record.stage1_oos, record.stage2_oos = oos_stage_losses(
                    model, self.data.joint_stage1(), self.data.joint_stage2()
                )
            if self.log is not None and self.log.tracks_test_loss:
                record.test_loss = mse(predict(model, self.log.test_x, self.log.test_o), self.log.test_truth)
        if self.log is not None:
            self.log.append(record)
        if self.patience is None or record.stage2_oos is None:
            return False
        if record.stage2_oos < self.best:
            self.best, self.stale = record.stage2_oos, 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            logger.info("⏹️ early stop at iteration {}: stage-2 out-of-sample loss flat for {} iterations", iteration, self.stale)
            if self.log is not None:
                self.log.stopped_early = True
            return True
        return False


class TrainingController:
    @staticmethod
    def fixed_feature_2sls(
        data: IvDataset,
        psi_fixed: Featurizer,
        phi_fixed: Featurizer,
        lambda1: float,
        lambda2: float,
        add_intercept: bool = True,
        standardize_outcome: bool = False,
    ) -> StructuralModel:
        """Stage-1 and stage-2 ridge solves on the full data, no gradient steps."""
        return _closed_form_model(data, psi_fixed, phi_fixed, lambda1, lambda2, add_intercept, standardize_outcome)

    @staticmethod
    def ridge_regression(
        data: IvDataset,
        psi_fixed: Featurizer,
        lam: float,
        add_intercept: bool = True,
        standardize_outcome: bool = False,
    ) -> StructuralModel:
        """Naive regression of y on features of x over every jointly observed row, ignoring the instrument."""
        if not data.has_joint:
            raise MissingDataError("naive regression needs rows with both treatment and outcome")
        x = np.vstack([data.stage1_x, data.stage2_x])
        y, y_mean, y_scale = _outcome(np.concatenate([data.stage1_y, data.stage2_y]), standardize_outcome)
        design = with_intercept(featurize(psi_fixed, x), add_intercept)
        u = ridge_solve(design, y, lam, design.shape[0])[:, 0]
        return StructuralModel(u=u, psi=psi_fixed, add_intercept=add_intercept, y_mean=y_mean, y_scale=y_scale)

    @staticmethod
    def train_dfiv(
        data: IvDataset,
        psi_map: Featurizer,
        phi_map: Featurizer,
        cfg: DfivConfig,
        log: Optional[TrainingLog] = None,
    ) -> StructuralModel:
        """
        Alternating training. Each outer iteration samples one stage-1 and one
        stage-2 batch, takes ``inner_stage1`` steps on the instrument map with
        V re-solved on the batch, then ``inner_stage2`` steps on the treatment
        map with V and u re-solved. u is finally refit on the full data.
        """
        m, n = data.m, data.n
        batch_m, batch_n = cfg.resolve_batches(m, n)
        rng = RngStream(cfg.seed, BATCH_STREAM)
        x1, z1, z2 = data.stage1_x, data.stage1_instruments(), data.stage2_instruments()
        y2, _, _ = _outcome(data.stage2_y, cfg.standardize_outcome)
        psi, phi = psi_map, phi_map
        psi_state = fresh_adam(psi) if isinstance(psi, FeatureMap) else None
        phi_state = fresh_adam(phi) if isinstance(phi, FeatureMap) else None
        monitor = _Monitor(data, cfg, log)
        add = cfg.add_intercept

        logger.info("🚀 DFIV training: m={} n={} batches=({}, {}) epochs={}", m, n, batch_m, batch_n, cfg.epochs)
        for iteration in range(cfg.epochs):
            idx1, idx2 = sample_batch(rng, m, batch_m), sample_batch(rng, n, batch_n)
            xb, zb, z2b, y2b = x1[idx1], z1[idx1], z2[idx2], y2[idx2]

            if phi_state is not None:
                psi_feats = with_intercept(featurize(psi, xb), add)
                for _ in range(cfg.inner_stage1):
                    step = grad_stage1_thetaZ(psi_feats, phi, zb, cfg.lambda1, add, cfg.stage1_gradient)
                    phi, phi_state = adam_step(phi, step.grads, phi_state, cfg.lr)

            phi1b = with_intercept(featurize(phi, zb), add)
            phi2b = with_intercept(featurize(phi, z2b), add)
            projector = Stage1Projector(phi1b, cfg.lambda1)
            if psi_state is not None:
                for _ in range(cfg.inner_stage2):
                    step = grad_stage2_thetaX(psi, xb, projector, phi2b, y2b, cfg.lambda2, add)
                    psi, psi_state = adam_step(psi, step.grads, psi_state, cfg.lr)

            psi1b = with_intercept(featurize(psi, xb), add)
            sol = projector.solve(psi1b)
            u = stage2_solve(sol, phi2b, y2b, cfg.lambda2)
            l1 = stage1_loss(psi1b, phi1b, sol, cfg.lambda1)
            l2 = stage2_loss(sol, phi2b, y2b, u, cfg.lambda2)
            current_psi, current_phi = psi, phi
            stop = monitor.observe(
                iteration,
                l1,
                l2,
                lambda: _closed_form_model(
                    data, current_psi, current_phi, cfg.lambda1, cfg.lambda2, add, cfg.standardize_outcome
                ),
            )
            if stop:
                break

        model = _closed_form_model(data, psi, phi, cfg.lambda1, cfg.lambda2, add, cfg.standardize_outcome)
        logger.info("✅ DFIV training finished")
        return model

    @staticmethod
    def train_dfiv_obs(
        data: IvDataset,
        psi_map: Featurizer,
        phi_map: Featurizer,
        xi_map: Featurizer,
        cfg: ObsConfig,
        log: Optional[TrainingLog] = None,
    ) -> StructuralModel:
        """
        Observable-confounder training. Per outer iteration: stage-1 steps on
        the instrument map until the relative loss change falls below
        ``convergence_tol`` (capped at ``stage1_max_inner``), or exactly
        ``inner_stage1`` steps when ``run_to_convergence`` is off; then a
        treatment-map update followed by an observable-map update, both on
        the stage-2 loss and the same batch.
        """
        if not data.has_observables:
            raise MissingDataError("observable-confounder training needs observables in both stages")
        m, n = data.m, data.n
        batch_m, batch_n = cfg.resolve_batches(m, n)
        rng = RngStream(cfg.seed, BATCH_STREAM)
        x1, zo1, zo2, o2 = data.stage1_x, data.stage1_instruments(), data.stage2_instruments(), data.stage2_o
        y2, _, _ = _outcome(data.stage2_y, cfg.standardize_outcome)
        psi, phi, xi = psi_map, phi_map, xi_map
        psi_state = fresh_adam(psi) if isinstance(psi, FeatureMap) else None
        phi_state = fresh_adam(phi) if isinstance(phi, FeatureMap) else None
        xi_state = fresh_adam(xi) if isinstance(xi, FeatureMap) else None
        monitor = _Monitor(data, cfg, log)
        add = cfg.add_intercept
        stage1_cap = cfg.stage1_max_inner if cfg.run_to_convergence else cfg.inner_stage1

        logger.info("🚀 DFIV training with observables: m={} n={} epochs={}", m, n, cfg.epochs)
        for iteration in range(cfg.epochs):
            idx1, idx2 = sample_batch(rng, m, batch_m), sample_batch(rng, n, batch_n)
            xb, zob, zo2b, o2b, y2b = x1[idx1], zo1[idx1], zo2[idx2], o2[idx2], y2[idx2]

            if phi_state is not None:
                psi_feats = with_intercept(featurize(psi, xb), add)
                previous = None
                for _ in range(stage1_cap):
                    step = grad_stage1_thetaZ(psi_feats, phi, zob, cfg.lambda1, add, cfg.stage1_gradient)
                    phi, phi_state = adam_step(phi, step.grads, phi_state, cfg.lr)
                    if cfg.run_to_convergence and previous is not None:
                        if abs(previous - step.loss) <= cfg.convergence_tol * max(abs(previous), 1e-300):
                            break
                    previous = step.loss

            phi1b = with_intercept(featurize(phi, zob), add)
            phi2b = with_intercept(featurize(phi, zo2b), add)
            projector = Stage1Projector(phi1b, cfg.lambda1)
            for _ in range(cfg.inner_stage2):
                if psi_state is not None:
                    step = grad_stage2_obs(psi, xi, xb, o2b, projector, phi2b, y2b, cfg.lambda2, add)
                    psi, psi_state = adam_step(psi, step.grads_x, psi_state, cfg.lr)
                if xi_state is not None:
                    step = grad_stage2_obs(psi, xi, xb, o2b, projector, phi2b, y2b, cfg.lambda2, add)
                    xi, xi_state = adam_step(xi, step.grads_o, xi_state, cfg.lr)

            psi1b = with_intercept(featurize(psi, xb), add)
            xi2b = with_intercept(featurize(xi, o2b), add)
            sol = projector.solve(psi1b)
            u = stage2_solve_obs(sol, phi2b, xi2b, y2b, cfg.lambda2)
            l1 = stage1_loss(psi1b, phi1b, sol, cfg.lambda1)
            l2 = stage2_loss_obs(sol, phi2b, xi2b, y2b, u, cfg.lambda2)
            current = (psi, phi, xi)
            stop = monitor.observe(
                iteration,
                l1,
                l2,
                lambda: _closed_form_model(
                    data, current[0], current[1], cfg.lambda1, cfg.lambda2, add, cfg.standardize_outcome, xi=current[2]
                ),
            )
            if stop:
                break

        model = _closed_form_model(data, psi, phi, cfg.lambda1, cfg.lambda2, add, cfg.standardize_outcome, xi=xi)
        logger.info("✅ DFIV training with observables finished")
        return model

    @staticmethod
    def ablation_joint_training(
        data: IvDataset,
        psi_map: FeatureMap,
        phi_map: FeatureMap,
        cfg: DfivConfig,
        log: Optional[TrainingLog] = None,
    ) -> TrainingLog:
        """
        Gradient steps on both maps against the stage-2 loss alone, with V and
        u solved analytically on each batch. Records stage-1 loss, stage-2
        loss and, with a test grid attached, the structural test loss. A
        divergence ends the run and is recorded on the log instead of raised.
        """
        log = log if log is not None else TrainingLog()
        m, n = data.m, data.n
        batch_m, batch_n = cfg.resolve_batches(m, n)
        rng = RngStream(cfg.seed, BATCH_STREAM)
        x1, z1, z2 = data.stage1_x, data.stage1_instruments(), data.stage2_instruments()
        y2, _, _ = _outcome(data.stage2_y, cfg.standardize_outcome)
        psi, phi = psi_map, phi_map
        psi_state, phi_state = fresh_adam(psi), fresh_adam(phi)
        add = cfg.add_intercept

        logger.info("🧪 joint-training ablation: epochs={}", cfg.epochs)
        for iteration in range(cfg.epochs):
            idx1, idx2 = sample_batch(rng, m, batch_m), sample_batch(rng, n, batch_n)
            try:
                step = grad_joint(psi, phi, x1[idx1], z1[idx1], z2[idx2], y2[idx2], cfg.lambda1, cfg.lambda2, add)
                check_losses(iteration, step.stage1_loss, step.loss)
                psi, psi_state = adam_step(psi, step.grads_x, psi_state, cfg.lr)
                phi, phi_state = adam_step(phi, step.grads_z, phi_state, cfg.lr)
                record = IterationRecord(iteration=iteration, stage1_loss=step.stage1_loss, stage2_loss=step.loss)
                if log.tracks_test_loss:
                    model = _closed_form_model(data, psi, phi, cfg.lambda1, cfg.lambda2, add, cfg.standardize_outcome)
                    record.test_loss = mse(predict(model, log.test_x, log.test_o), log.test_truth)
            except DfivError as exc:
                logger.warning("⚠️ joint training diverged at iteration {}: {}", iteration, exc.detail)
                log.diverged = True
                break
            log.append(record)
        return log
