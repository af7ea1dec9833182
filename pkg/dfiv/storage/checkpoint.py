"""
JSON checkpoints for featurizers and fitted structural models.

Parameters are stored as row-major nested lists; Python floats serialize
with ``repr`` so every value reads back bit-exactly.
"""
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from dfiv.exceptions import InvalidSpecError
from dfiv.models.features import (
    EmptyFeatures,
    FeatureMap,
    Featurizer,
    IdentityFeatures,
    InputScaler,
    PolynomialFeatures,
    RandomFourierFeatures,
    TabularFeatures,
)
from dfiv.models.iv import Stage1Sol, StructuralModel
from dfiv.storage.results import atomic_write

FORMAT_VERSION = 1


def _scaler_to_dict(scaler: Optional[InputScaler]) -> Optional[Dict[str, Any]]:
    if scaler is None:
        return None
    return {"mean": scaler.mean.tolist(), "scale": scaler.scale.tolist()}


def _scaler_from_dict(payload: Optional[Dict[str, Any]]) -> Optional[InputScaler]:
    if payload is None:
        return None
    return InputScaler(mean=np.asarray(payload["mean"], dtype=np.float64), scale=np.asarray(payload["scale"], dtype=np.float64))


def featurizer_to_dict(featurizer: Featurizer) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"kind": featurizer.kind, "scaler": _scaler_to_dict(featurizer.scaler)}
    if isinstance(featurizer, FeatureMap):
        payload.update(
            layer_dims=list(featurizer.layer_dims),
            activations=[a.value for a in featurizer.activations],
            weights=[w.tolist() for w in featurizer.weights],
            biases=[b.tolist() for b in featurizer.biases],
        )
        return payload
    payload["input_dim"] = featurizer.input_dim
    if isinstance(featurizer, PolynomialFeatures):
        payload["degree"] = featurizer.degree
    elif isinstance(featurizer, RandomFourierFeatures):
        payload.update(omega=featurizer.omega.tolist(), phase=featurizer.phase.tolist(), bandwidth=featurizer.bandwidth)
    elif isinstance(featurizer, TabularFeatures):
        payload.update(n_states=featurizer.n_states, n_actions=featurizer.n_actions)
    return payload


def featurizer_from_dict(payload: Dict[str, Any]) -> Featurizer:
    kind = payload.get("kind")
    scaler = _scaler_from_dict(payload.get("scaler"))
    if kind == "mlp":
        weights = [np.asarray(w, dtype=np.float64).reshape(out, inp) for w, inp, out in
                   zip(payload["weights"], payload["layer_dims"][:-1], payload["layer_dims"][1:])]
        return FeatureMap(
            layer_dims=list(payload["layer_dims"]),
            weights=weights,
            biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
            activations=list(payload["activations"]),
            scaler=scaler,
        )
    input_dim = int(payload["input_dim"])
    if kind == "identity":
        return IdentityFeatures(input_dim, scaler=scaler)
    if kind == "empty":
        return EmptyFeatures(input_dim, scaler=scaler)
    if kind == "polynomial":
        return PolynomialFeatures(input_dim, scaler=scaler, degree=int(payload["degree"]))
    if kind == "rff":
        return RandomFourierFeatures(
            input_dim,
            scaler=scaler,
            omega=np.asarray(payload["omega"], dtype=np.float64).reshape(input_dim, -1),
            phase=np.asarray(payload["phase"], dtype=np.float64),
            bandwidth=float(payload["bandwidth"]),
        )
    if kind == "tabular":
        return TabularFeatures(input_dim, scaler=scaler, n_states=int(payload["n_states"]), n_actions=int(payload["n_actions"]))
    raise InvalidSpecError(f"unknown featurizer kind {kind!r}")


def model_to_dict(model: StructuralModel) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "tensor_product": model.tensor_product,
        "add_intercept": model.add_intercept,
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "u": model.u.tolist(),
        "psi": featurizer_to_dict(model.psi),
        "xi": featurizer_to_dict(model.xi) if model.xi is not None else None,
        "phi": featurizer_to_dict(model.phi) if model.phi is not None else None,
        "stage1_v": model.stage1.V.tolist() if model.stage1 is not None else None,
    }


def model_from_dict(payload: Dict[str, Any]) -> StructuralModel:
    if payload.get("format_version") != FORMAT_VERSION:
        raise InvalidSpecError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    xi = featurizer_from_dict(payload["xi"]) if payload.get("xi") is not None else None
    if bool(payload.get("tensor_product")) != (xi is not None):
        raise InvalidSpecError("checkpoint tensor-product flag disagrees with its observable features")
    stage1 = payload.get("stage1_v")
    return StructuralModel(
        u=np.asarray(payload["u"], dtype=np.float64),
        psi=featurizer_from_dict(payload["psi"]),
        xi=xi,
        add_intercept=bool(payload["add_intercept"]),
        y_mean=float(payload["y_mean"]),
        y_scale=float(payload["y_scale"]),
        phi=featurizer_from_dict(payload["phi"]) if payload.get("phi") is not None else None,
        stage1=Stage1Sol(V=np.atleast_2d(np.asarray(stage1, dtype=np.float64))) if stage1 is not None else None,
    )


def save_model(model: StructuralModel, path: Union[str, Path]) -> Path:
    with atomic_write(path) as handle:
        json.dump(model_to_dict(model), handle)
    return Path(path)


def load_model(path: Union[str, Path]) -> StructuralModel:
    with open(path, "r", encoding="utf-8") as handle:
        return model_from_dict(json.load(handle))


def checkpoint_path(output: Union[str, Path], seed: int, rho: Optional[float] = None) -> Path:
    """``run.json`` -> ``run.models/seed3.json`` (or ``rho0.5_seed3.json`` in a sweep)."""
    output = Path(output)
    name = f"seed{seed}.json" if rho is None else f"rho{rho:g}_seed{seed}.json"
    return output.with_name(f"{output.stem}.models") / name
