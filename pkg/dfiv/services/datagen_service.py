"""
Synthetic IV processes with known structural functions.

Every generator draws each variable from its own child stream of a root
stream keyed by the config seed, so adding a variable never shifts the
draws of another.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger

from dfiv.models.features import Mat
from dfiv.models.iv import EvaluationGrid, IvDataset, SyntheticData
from dfiv.models.rng import RngStream
from dfiv.schemas.datagen import DemandConfig, HighDimConfig, LinearGaussianConfig
from dfiv.services.linalg_service import sample_gaussian

DEMAND_STREAM = 11
LINEAR_STREAM = 12
HIGHDIM_STREAM = 13
EMBEDDING_STREAM = 14

DEMAND_X_COLUMNS = ["p", "t", "s"]
DEMAND_Z_COLUMNS = ["c", "t", "s"]


def _split(total: int):
    m = total // 2
    return slice(0, m), slice(m, total)


# Demand design -----------------------------------------------------------


def demand_h(t):
    t = np.asarray(t, dtype=np.float64)
    return 2.0 * ((t - 5.0) ** 4 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 2.0)


def demand_fstruct(p, t, s):
    s = np.asarray(s, dtype=np.float64)
    if np.any((s < 1) | (s > 7) | (s != np.round(s))):
        raise ValueError("customer type s must be an integer in 1..7")
    p = np.asarray(p, dtype=np.float64)
    return 100.0 + (10.0 + p) * s * demand_h(t) - 2.0 * p


def demand_generate(cfg: DemandConfig, observables: bool = False) -> SyntheticData:
    """
    Demand design with confounding strength rho. The first half of the rows
    is stage 1, the rest stage 2. Without observables X = (p, t, s) and
    Z = (c, t, s); with observables X = p, Z = c and O = (t, s).
    C ~ N(0, 1), T ~ U(0, 10) and S is uniform on 1..7, all independent of
    the noise pair (V, eps).
    """
    root = RngStream(cfg.seed, DEMAND_STREAM)
    n = cfg.n_total
    s = root.split("s").generator.integers(1, 8, size=n).astype(np.float64)
    t = root.split("t").generator.uniform(0.0, 10.0, size=n)
    c = sample_gaussian(root.split("c"), 0.0, 1.0, n)
    v_noise = sample_gaussian(root.split("v"), 0.0, 1.0, n)
    eps = cfg.rho * v_noise + np.sqrt(1.0 - cfg.rho**2) * sample_gaussian(root.split("eps"), 0.0, 1.0, n)
    p = 25.0 + (c + 3.0) * demand_h(t) + v_noise
    truth = demand_fstruct(p, t, s)
    y = truth + eps

    if observables:
        x, z, o = p[:, None], c[:, None], np.column_stack([t, s])
        columns = {"x": ["p"], "z": ["c"], "o": ["t", "s"]}
    else:
        x, z, o = np.column_stack([p, t, s]), np.column_stack([c, t, s]), None
        columns = {"x": list(DEMAND_X_COLUMNS), "z": list(DEMAND_Z_COLUMNS)}

    first, second = _split(n)
    dataset = IvDataset(
        stage1_x=x[first],
        stage1_z=z[first],
        stage2_y=y[second],
        stage2_z=z[second],
        stage1_o=None if o is None else o[first],
        stage2_o=None if o is None else o[second],
        stage1_y=y[first],
        stage2_x=x[second],
    )
    logger.debug("demand data: rho={} n={} seed={}", cfg.rho, n, cfg.seed)
    return SyntheticData(
        dataset=dataset,
        test_grid=demand_test_grid(observables),
        hidden={"v_noise": v_noise, "eps": eps, "f_struct": truth},
        columns=columns,
    )


def demand_test_grid(observables: bool = False) -> EvaluationGrid:
    """20 prices x 20 times x 7 types, endpoints included, p outer and s inner."""
    prices = np.linspace(10.0, 25.0, 20)
    times = np.linspace(0.0, 10.0, 20)
    types = np.arange(1, 8, dtype=np.float64)
    p, t, s = (axis.ravel() for axis in np.meshgrid(prices, times, types, indexing="ij"))
    truth = demand_fstruct(p, t, s)
    if observables:
        return EvaluationGrid(x=p[:, None], truth=truth, o=np.column_stack([t, s]), columns=["p", "t", "s"])
    return EvaluationGrid(x=np.column_stack([p, t, s]), truth=truth, columns=list(DEMAND_X_COLUMNS))


# Linear-Gaussian sanity model ---------------------------------------------


def linear_gaussian_generate(cfg: LinearGaussianConfig) -> SyntheticData:
    """Z ~ N(0,1), X = aZ + e, Y = bX + eps with corr(e, eps) = r; ``cfg.n`` rows per stage (2 * cfg.n in total)."""
    root = RngStream(cfg.seed, LINEAR_STREAM)
    total = 2 * cfg.n
    z = sample_gaussian(root.split("z"), 0.0, 1.0, total)
    e = sample_gaussian(root.split("e"), 0.0, 1.0, total)
    independent = sample_gaussian(root.split("eps"), 0.0, 1.0, total)
    eps = cfg.confounding * e + np.sqrt(1.0 - cfg.confounding**2) * independent
    x = cfg.strength * z + e
    y = cfg.slope * x + eps

    first, second = _split(total)
    dataset = IvDataset(
        stage1_x=x[first],
        stage1_z=z[first],
        stage2_y=y[second],
        stage2_z=z[second],
        stage1_y=y[first],
        stage2_x=x[second],
    )
    grid_x = np.linspace(-3.0, 3.0, 121)
    return SyntheticData(
        dataset=dataset,
        test_grid=EvaluationGrid(x=grid_x[:, None], truth=cfg.slope * grid_x, columns=["x"]),
        hidden={"e": e, "eps": eps},
        columns={"x": ["x"], "z": ["z"]},
    )


# High-dimensional treatment -----------------------------------------------


def _latent_features(scale: Mat, rotation: Mat, pos_x: Mat, pos_y: Mat) -> Mat:
    return np.column_stack([scale, np.cos(rotation), np.sin(rotation), pos_x, pos_y])


@dataclass
class HighDimProcess:
    """
    Fixed smooth embedding of the latents (scale, rotation, posX, posY) into
    R^d, and the calibrated structural function (||A x||^2 - c0) / c1.
    """

    omega: Mat
    phase: Mat
    outcome_matrix: Mat
    c0: float
    c1: float

    @classmethod
    def build(cls, cfg: HighDimConfig) -> "HighDimProcess":
        root = RngStream(cfg.embedding_seed, EMBEDDING_STREAM)
        omega = root.split("omega").generator.normal(0.0, 1.0 / cfg.embedding_bandwidth, size=(5, cfg.treatment_dim))
        phase = root.split("phase").generator.uniform(0.0, 2.0 * np.pi, size=cfg.treatment_dim)
        outcome_matrix = root.split("A").generator.uniform(0.0, 1.0, size=(cfg.outcome_rows, cfg.treatment_dim))
        process = cls(omega=omega, phase=phase, outcome_matrix=outcome_matrix, c0=0.0, c1=1.0)
        if cfg.c0 is not None and cfg.c1 is not None:
            process.c0, process.c1 = cfg.c0, cfg.c1
            return process
        latents = sample_latents(root.split("calibration"), cfg.calibration_draws)
        raw = process.raw_outcome(process.embed(*latents))
        process.c0 = float(raw.mean()) if cfg.c0 is None else cfg.c0
        process.c1 = float(raw.std()) if cfg.c1 is None else cfg.c1
        return process

    def embed(self, scale: Mat, rotation: Mat, pos_x: Mat, pos_y: Mat) -> Mat:
        return np.cos(_latent_features(scale, rotation, pos_x, pos_y) @ self.omega + self.phase)

    def raw_outcome(self, x: Mat) -> Mat:
        return np.sum((np.atleast_2d(x) @ self.outcome_matrix.T) ** 2, axis=1)

    def structural(self, x: Mat) -> Mat:
        return (self.raw_outcome(x) - self.c0) / self.c1


def sample_latents(rng: RngStream, n: int, fixed_pos_y: Optional[float] = None):
    scale = rng.split("scale").generator.uniform(0.5, 1.0, size=n)
    rotation = rng.split("rotation").generator.uniform(0.0, 2.0 * np.pi, size=n)
    pos_x = rng.split("pos_x").generator.uniform(0.0, 1.0, size=n)
    if fixed_pos_y is None:
        pos_y = rng.split("pos_y").generator.uniform(0.0, 1.0, size=n)
    else:
        pos_y = np.full(n, float(fixed_pos_y))
    return scale, rotation, pos_x, pos_y


def highdim_test_grid(process: HighDimProcess) -> EvaluationGrid:
    """3 scales x 4 rotations x 7 posX x 7 posY = 588 noise-free points."""
    scales = np.linspace(0.5, 1.0, 3)
    rotations = np.linspace(0.0, 2.0 * np.pi, 4, endpoint=False)
    positions = np.linspace(0.0, 1.0, 7)
    scale, rotation, pos_x, pos_y = (
        axis.ravel() for axis in np.meshgrid(scales, rotations, positions, positions, indexing="ij")
    )
    x = process.embed(scale, rotation, pos_x, pos_y)
    return EvaluationGrid(x=x, truth=process.structural(x), columns=[f"x{i}" for i in range(x.shape[1])])


def highdim_generate(cfg: HighDimConfig, n: int, seed: int) -> SyntheticData:
    """
    X = Emb(latents) + eta, Y = f(X) + 32 (posY - 0.5) + eps, Z = (scale,
    rotation, posX). posY is the hidden confounder. ``n`` rows in total,
    split evenly between the stages.
    """
    process = HighDimProcess.build(cfg)
    root = RngStream(seed, HIGHDIM_STREAM)
    scale, rotation, pos_x, pos_y = sample_latents(root, n, cfg.fixed_pos_y)
    clean = process.embed(scale, rotation, pos_x, pos_y)
    eta = root.split("eta").generator.normal(0.0, 1.0, size=clean.shape) * cfg.eta_sd
    x = clean + eta
    truth = process.structural(x)
    eps = sample_gaussian(root.split("eps"), 0.0, cfg.eps_sd, n)
    y = truth + 32.0 * (pos_y - 0.5) + eps
    z = np.column_stack([scale, rotation, pos_x])

    first, second = _split(n)
    dataset = IvDataset(
        stage1_x=x[first],
        stage1_z=z[first],
        stage2_y=y[second],
        stage2_z=z[second],
        stage1_y=y[first],
        stage2_x=x[second],
    )
    return SyntheticData(
        dataset=dataset,
        test_grid=highdim_test_grid(process),
        hidden={"pos_y": pos_y, "eps": eps, "f_struct": truth},
        columns={
            "x": [f"x{i}" for i in range(cfg.treatment_dim)],
            "z": ["scale", "rotation", "pos_x"],
        },
    )
