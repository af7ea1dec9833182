"""
Feature maps: MLP evaluation, reverse-mode parameter gradients, Adam,
initialization, and the fixed random-Fourier featurizer.
"""
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from dfiv.config.settings import settings
from dfiv.exceptions import DimensionMismatchError, NonFiniteError
from dfiv.models.features import (
    Activation,
    AdamState,
    FeatureMap,
    Featurizer,
    GradBuffer,
    InputScaler,
    Mat,
    RandomFourierFeatures,
    check_inputs,
)
from dfiv.models.rng import RngStream


def init_params(
    layer_dims: Sequence[int],
    activations: Sequence[Union[Activation, str]],
    rng: RngStream,
) -> FeatureMap:
    """Glorot-uniform weights, zero biases."""
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs an input dimension and at least one layer")
    if len(activations) != len(layer_dims) - 1:
        raise DimensionMismatchError("one activation per layer is required")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.generator.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return FeatureMap(
        layer_dims=list(layer_dims),
        weights=weights,
        biases=biases,
        activations=[Activation(a) for a in activations],
    )


def mlp(dims: Sequence[int], rng: RngStream, hidden: str = "relu", last: str = "relu") -> FeatureMap:
    """Shorthand: hidden activation on every layer but the last."""
    activations = [hidden] * (len(dims) - 2) + [last]
    return init_params(dims, activations, rng)


def _activate(kind: Activation, pre: Mat) -> Mat:
    if kind is Activation.RELU:
        return np.maximum(pre, 0.0)
    if kind is Activation.TANH:
        return np.tanh(pre)
    return pre


def _activation_grad(kind: Activation, pre: Mat, post: Mat) -> Mat:
    if kind is Activation.RELU:
        # subgradient at exactly 0 is 0
        return (pre > 0.0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - post * post
    return np.ones_like(pre)


def _forward_cache(fm: FeatureMap, inputs: Mat) -> Tuple[List[Mat], List[Mat]]:
    inputs = check_inputs(inputs, fm.input_dim)
    if fm.scaler is not None:
        inputs = fm.scaler.apply(inputs)
    posts, pres = [inputs], []
    for w, b, kind in zip(fm.weights, fm.biases, fm.activations):
        pre = posts[-1] @ w.T + b
        pres.append(pre)
        posts.append(_activate(kind, pre))
    return posts, pres


def forward(fm: FeatureMap, inputs: Mat) -> Mat:
    posts, _ = _forward_cache(fm, inputs)
    return posts[-1]


def backward(fm: FeatureMap, inputs: Mat, upstream: Mat, into: GradBuffer | None = None) -> GradBuffer:
    """
    Gradient of <upstream, forward(fm, inputs)> with respect to every weight
    and bias. Accumulates into ``into`` when given.
    """
    posts, pres = _forward_cache(fm, inputs)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != posts[-1].shape:
        raise DimensionMismatchError(
            f"upstream shape {upstream.shape} differs from output shape {posts[-1].shape}"
        )
    grads = into if into is not None else GradBuffer.zeros_like(fm)
    delta = upstream
    for layer in reversed(range(fm.n_layers)):
        delta = delta * _activation_grad(fm.activations[layer], pres[layer], posts[layer + 1])
        grads.weights[layer] += delta.T @ posts[layer]
        grads.biases[layer] += delta.sum(axis=0)
        if layer:
            delta = delta @ fm.weights[layer]
    return grads


def adam_step(fm: FeatureMap, grads: GradBuffer, state: AdamState, lr: float) -> Tuple[FeatureMap, AdamState]:
    """One bias-corrected Adam update; returns new parameter and optimizer values."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    flat = grads.parameters()
    if len(flat) != len(fm.parameters()) or any(g.shape != p.shape for g, p in zip(flat, fm.parameters())):
        raise DimensionMismatchError("gradient buffer does not match the feature map")
    if not all(np.all(np.isfinite(g)) for g in flat):
        raise NonFiniteError("gradient contains non-finite entries")

    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(fm.parameters(), flat, state.first_moment.parameters(), state.second_moment.parameters()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params.append(p - lr * (m / correction1) / (np.sqrt(v / correction2) + eps))
        new_m.append(m)
        new_v.append(v)

    updated = FeatureMap(
        layer_dims=list(fm.layer_dims),
        weights=new_params[0::2],
        biases=new_params[1::2],
        activations=list(fm.activations),
        scaler=fm.scaler,
    )
    new_state = AdamState(
        first_moment=GradBuffer(weights=new_m[0::2], biases=new_m[1::2]),
        second_moment=GradBuffer(weights=new_v[0::2], biases=new_v[1::2]),
        step=step,
        beta1=b1,
        beta2=b2,
        eps=eps,
    )
    return updated, new_state


def fresh_adam(fm: FeatureMap) -> AdamState:
    return AdamState.fresh(fm, beta1=settings.ADAM_BETA1, beta2=settings.ADAM_BETA2, eps=settings.ADAM_EPS)


def featurize(featurizer: Featurizer, inputs: Mat) -> Mat:
    if isinstance(featurizer, FeatureMap):
        return forward(featurizer, inputs)
    return featurizer.transform(inputs)


def with_intercept(features: Mat, add_intercept: bool = True) -> Mat:
    if not add_intercept:
        return features
    return np.hstack([features, np.ones((features.shape[0], 1))])


def strip_intercept(upstream: Mat, add_intercept: bool = True) -> Mat:
    return upstream[:, :-1] if add_intercept else upstream


def fit_scaler(featurizer: Featurizer, inputs: Mat) -> Featurizer:
    """Attach a column standardizer fitted on ``inputs``."""
    featurizer.scaler = InputScaler.fit(inputs)
    return featurizer


def median_heuristic(points: Mat, exact_limit: int | None = None) -> float:
    """Median pairwise Euclidean distance; evenly spaced rows are used above the exact limit."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    limit = settings.MEDIAN_EXACT_LIMIT if exact_limit is None else exact_limit
    if points.shape[0] > limit:
        index = np.linspace(0, points.shape[0] - 1, limit).round().astype(int)
        points = points[index]
    median = float(np.median(pdist(points)))
    if median <= 0.0:
        raise ValueError("median pairwise distance is zero; points are (mostly) identical")
    return median


def rff_map(
    input_dim: int,
    feature_count: int,
    bandwidth: Union[float, str],
    rng: RngStream,
    points: Mat | None = None,
) -> RandomFourierFeatures:
    """
    Random Fourier features for the Gaussian kernel exp(-|x-x'|^2 / (2 bw^2)).
    ``bandwidth="median"`` takes the median heuristic over ``points``.
    """
    if feature_count < 2 or feature_count % 2:
        raise ValueError("feature_count must be an even number >= 2")
    if bandwidth == "median":
        if points is None:
            raise ValueError("median bandwidth needs the points it is computed from")
        bandwidth = median_heuristic(points)
    bandwidth = float(bandwidth)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    omega = rng.generator.normal(0.0, 1.0 / bandwidth, size=(input_dim, feature_count))
    phase = rng.generator.uniform(0.0, 2.0 * np.pi, size=feature_count)
    return RandomFourierFeatures(input_dim=input_dim, omega=omega, phase=phase, bandwidth=bandwidth)
