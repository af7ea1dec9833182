"""
Feature map types: trainable MLPs, their gradient and optimizer buffers,
and the fixed featurizers used by the classical baselines.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import ClassVar, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from dfiv.exceptions import DimensionMismatchError

Mat = NDArray[np.float64]


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


@dataclass
class InputScaler:
    """Column standardization applied before the first layer; never trained."""

    mean: Mat
    scale: Mat

    @classmethod
    def fit(cls, inputs: Mat) -> "InputScaler":
        inputs = np.asarray(inputs, dtype=np.float64)
        mean = inputs.mean(axis=0)
        scale = inputs.std(axis=0)
        scale[scale == 0.0] = 1.0
        return cls(mean=mean, scale=scale)

    def apply(self, inputs: Mat) -> Mat:
        return (inputs - self.mean) / self.scale


def check_inputs(inputs: Mat, input_dim: int) -> Mat:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.ndim != 2 or inputs.shape[1] != input_dim:
        raise DimensionMismatchError(
            f"expected inputs with {input_dim} columns, got shape {inputs.shape}"
        )
    return inputs


@dataclass
class FeatureMap:
    """
    Multilayer perceptron. ``weights[l]`` has shape (out, in) so a layer maps
    rows as ``inputs @ W.T + b``.
    """

    layer_dims: List[int]
    weights: List[Mat]
    biases: List[Mat]
    activations: List[Activation]
    scaler: Optional[InputScaler] = None
    trainable: ClassVar[bool] = True
    kind: ClassVar[str] = "mlp"

    def __post_init__(self) -> None:
        n_layers = len(self.layer_dims) - 1
        if n_layers < 1:
            raise ValueError("a feature map needs at least one layer")
        if not (len(self.weights) == len(self.biases) == len(self.activations) == n_layers):
            raise DimensionMismatchError("layer lists disagree with layer_dims")
        self.activations = [Activation(a) for a in self.activations]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]) or b.shape != (self.layer_dims[i + 1],):
                raise DimensionMismatchError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not match dims "
                    f"{self.layer_dims[i]}->{self.layer_dims[i + 1]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[Mat]:
        """Weights and biases interleaved, layer by layer."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "FeatureMap":
        return FeatureMap(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            scaler=self.scaler,
        )


@dataclass
class GradBuffer:
    weights: List[Mat]
    biases: List[Mat]

    @classmethod
    def zeros_like(cls, fm: FeatureMap) -> "GradBuffer":
        return cls(
            weights=[np.zeros_like(w) for w in fm.weights],
            biases=[np.zeros_like(b) for b in fm.biases],
        )

    def parameters(self) -> List[Mat]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def add_(self, other: "GradBuffer") -> "GradBuffer":
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine += theirs
        return self

    def flat(self) -> Mat:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass
class AdamState:
    first_moment: GradBuffer
    second_moment: GradBuffer
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, fm: FeatureMap, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=GradBuffer.zeros_like(fm),
            second_moment=GradBuffer.zeros_like(fm),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


# Fixed featurizers -------------------------------------------------------


@dataclass
class FixedFeatures:
    input_dim: int
    scaler: Optional[InputScaler] = field(default=None, kw_only=True)
    trainable: ClassVar[bool] = False
    kind: ClassVar[str] = "fixed"

    @property
    def output_dim(self) -> int:
        raise NotImplementedError

    def transform(self, inputs: Mat) -> Mat:
        inputs = check_inputs(inputs, self.input_dim)
        if self.scaler is not None:
            inputs = self.scaler.apply(inputs)
        return self._features(inputs)

    def _features(self, inputs: Mat) -> Mat:
        raise NotImplementedError


@dataclass
class IdentityFeatures(FixedFeatures):
    kind: ClassVar[str] = "identity"

    @property
    def output_dim(self) -> int:
        return self.input_dim

    def _features(self, inputs: Mat) -> Mat:
        return inputs.copy()


@dataclass
class EmptyFeatures(FixedFeatures):
    """Zero-width map; with the intercept column appended it is the constant [1]."""

    kind: ClassVar[str] = "empty"

    @property
    def output_dim(self) -> int:
        return 0

    def _features(self, inputs: Mat) -> Mat:
        return np.zeros((inputs.shape[0], 0))


@dataclass
class PolynomialFeatures(FixedFeatures):
    """Tensor-product monomials of total degree 1..degree (constant excluded)."""

    degree: int = 3
    kind: ClassVar[str] = "polynomial"

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")

    @property
    def exponents(self) -> List[Tuple[int, ...]]:
        return [
            combo
            for k in range(1, self.degree + 1)
            for combo in itertools.combinations_with_replacement(range(self.input_dim), k)
        ]

    @property
    def output_dim(self) -> int:
        return len(self.exponents)

    def _features(self, inputs: Mat) -> Mat:
        columns = [np.prod(inputs[:, list(combo)], axis=1) for combo in self.exponents]
        return np.column_stack(columns) if columns else np.zeros((inputs.shape[0], 0))


@dataclass
class RandomFourierFeatures(FixedFeatures):
    """z(x) = sqrt(2/D) cos(x @ omega + phase), approximating a Gaussian kernel."""

    omega: Mat = field(default_factory=lambda: np.zeros((0, 0)))
    phase: Mat = field(default_factory=lambda: np.zeros(0))
    bandwidth: float = 1.0
    kind: ClassVar[str] = "rff"

    @property
    def output_dim(self) -> int:
        return int(self.omega.shape[1])

    def _features(self, inputs: Mat) -> Mat:
        scale = np.sqrt(2.0 / self.output_dim)
        return scale * np.cos(inputs @ self.omega + self.phase)


@dataclass
class TabularFeatures(FixedFeatures):
    """
    One-hot over (state, action) pairs. Inputs use the state-action encoding
    ``[one_hot(s) | one_hot(a)]``; output index is ``s * n_actions + a``.
    """

    n_states: int = 1
    n_actions: int = 1
    kind: ClassVar[str] = "tabular"

    @property
    def output_dim(self) -> int:
        return self.n_states * self.n_actions

    def _features(self, inputs: Mat) -> Mat:
        states = np.argmax(inputs[:, : self.n_states], axis=1)
        actions = np.argmax(inputs[:, self.n_states :], axis=1)
        out = np.zeros((inputs.shape[0], self.output_dim))
        out[np.arange(inputs.shape[0]), states * self.n_actions + actions] = 1.0
        return out


Featurizer = Union[FeatureMap, FixedFeatures]
