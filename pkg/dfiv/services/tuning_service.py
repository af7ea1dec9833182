"""
Hyperparameter selection by out-of-sample stage losses.

Each stage is scored on the data of the *other* stage: the stage-1 fit is
scored on the stage-2 rows (x~, z~) and the stage-2 fit on the stage-1 rows
(x, y, z). lambda1 is chosen first, then lambda2 given lambda1.
"""
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from dfiv.exceptions import DfivError, MissingDataError, TuningError
from dfiv.models.iv import IvDataset, JointTriples, StructuralModel
from dfiv.schemas.config import DfivConfig, TuneGrid
from dfiv.services.feature_service import featurize, with_intercept
from dfiv.services.prediction_service import instrument_prediction

Trainer = Callable[[IvDataset, DfivConfig], StructuralModel]


def _instrument_inputs(triples: JointTriples):
    if triples.o is None:
        return triples.z
    return np.hstack([triples.z, triples.o])


def stage1_oos_loss(model: StructuralModel, triples: JointTriples) -> float:
    """(1/n) sum ||psi(x~) - V phi(z~)||^2 over held-out rows."""
    if model.phi is None or model.stage1 is None:
        raise MissingDataError("model carries no stage-1 solution")
    psi = with_intercept(featurize(model.psi, triples.x), model.add_intercept)
    phi = with_intercept(featurize(model.phi, _instrument_inputs(triples)), model.add_intercept)
    residual = psi - phi @ model.stage1.V.T
    return float(np.sum(residual**2) / psi.shape[0])


def stage2_oos_loss(model: StructuralModel, triples: JointTriples) -> float:
    """(1/m) sum (y - u^T V phi(z))^2 over held-out rows."""
    predicted = instrument_prediction(model, triples.z, triples.o)
    return float(np.mean((np.asarray(triples.y).reshape(-1) - predicted) ** 2))


def oos_stage_losses(
    model: StructuralModel,
    stage1_joint: JointTriples,
    stage2_joint: JointTriples,
) -> Tuple[float, float]:
    return stage1_oos_loss(model, stage2_joint), stage2_oos_loss(model, stage1_joint)


def _reduced(cfg: DfivConfig, fraction: float) -> DfivConfig:
    epochs = int(np.ceil(cfg.epochs * fraction)) if cfg.epochs else 0
    return cfg.model_copy(update={"epochs": epochs})


def tune_lambdas(
    data: IvDataset,
    trainer: Trainer,
    grid: TuneGrid,
    cfg: DfivConfig,
    epoch_fraction: float = 1.0,
    scores: Optional[Dict[str, List[dict]]] = None,
) -> Tuple[float, float]:
    """
    Returns (lambda1*, lambda2*). ``trainer`` retrains the estimator for a
    candidate configuration. Candidates whose training fails are skipped;
    ties go to the smaller value since grids are ascending and only a
    strict improvement replaces the incumbent.
    """
    if not data.has_joint:
        raise MissingDataError("tuning needs stage-1 outcomes and stage-2 treatments")
    stage1_joint, stage2_joint = data.joint_stage1(), data.joint_stage2()
    base = _reduced(cfg, epoch_fraction)
    scores = scores if scores is not None else {}

    def _search(name: str, candidates: List[float], fixed: dict, score) -> float:
        best_value, best_loss = None, np.inf
        records = scores.setdefault(name, [])
        for value in candidates:
            candidate_cfg = base.model_copy(update={**fixed, name: value})
            try:
                model = trainer(data, candidate_cfg)
                loss = score(model)
            except DfivError as exc:
                logger.warning("⚠️ {}={} failed during tuning: {}", name, value, exc.detail)
                records.append({"value": value, "error": exc.detail})
                continue
            if not np.isfinite(loss):
                records.append({"value": value, "error": "non-finite out-of-sample loss"})
                continue
            records.append({"value": value, "loss": loss})
            if loss < best_loss:
                best_value, best_loss = value, loss
        if best_value is None:
            raise TuningError(f"every {name} candidate failed")
        logger.info("🎯 selected {}={} (out-of-sample loss {:.6g})", name, best_value, best_loss)
        return best_value

    lambda1 = _search("lambda1", grid.lambda1, {}, lambda model: stage1_oos_loss(model, stage2_joint))
    lambda2 = _search(
        "lambda2", grid.lambda2, {"lambda1": lambda1}, lambda model: stage2_oos_loss(model, stage1_joint)
    )
    return lambda1, lambda2
