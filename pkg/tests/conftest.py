"""
Shared fixtures and helpers
"""
from typing import Callable

import numpy as np
import pytest

from dfiv.models.features import FeatureMap, Mat
from dfiv.models.rng import RngStream
from dfiv.services.feature_service import mlp


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical acceptance runs (minutes); run with -m slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("-m"):
        return
    skip_slow = pytest.mark.skip(reason="slow acceptance run; use -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> RngStream:
    return RngStream(1234, 99)


@pytest.fixture
def np_rng() -> np.random.Generator:
    return np.random.default_rng(20240101)


@pytest.fixture
def tanh_net() -> Callable[..., FeatureMap]:
    """Factory for small smooth nets, so finite differences never cross a ReLU kink."""

    def build(dims, seed: int = 7) -> FeatureMap:
        return mlp(dims, RngStream(seed, 5), hidden="tanh", last="tanh")

    return build


def finite_difference(fm: FeatureMap, loss: Callable[[FeatureMap], float], step: float = 1e-6) -> Mat:
    """Central differences of ``loss`` over every parameter, flattened like GradBuffer.flat()."""
    out = []
    for index, param in enumerate(fm.parameters()):
        for flat_index in range(param.size):
            plus, minus = fm.copy(), fm.copy()
            plus.parameters()[index].flat[flat_index] += step
            minus.parameters()[index].flat[flat_index] -= step
            out.append((loss(plus) - loss(minus)) / (2.0 * step))
    return np.asarray(out)


def relative_error(analytic: Mat, numeric: Mat) -> float:
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
