"""
Evaluation of fitted structural models
"""
from typing import Optional

import numpy as np

from dfiv.exceptions import DimensionMismatchError, MissingDataError
from dfiv.models.features import Mat
from dfiv.models.iv import StructuralModel
from dfiv.services.confounded_service import rowwise_tensor_product
from dfiv.services.feature_service import featurize, with_intercept


def structural_features(model: StructuralModel, x: Mat, o: Optional[Mat] = None) -> Mat:
    feats = with_intercept(featurize(model.psi, x), model.add_intercept)
    if model.xi is None:
        if o is not None:
            raise DimensionMismatchError("model has no observable features but observables were given")
        return feats
    if o is None:
        raise MissingDataError("model uses observables; predict needs o")
    xi = with_intercept(featurize(model.xi, o), model.add_intercept)
    return rowwise_tensor_product(feats, xi)


def predict(model: StructuralModel, x: Mat, o: Optional[Mat] = None) -> Mat:
    """f(x[, o]) for every row, back in outcome units."""
    feats = structural_features(model, x, o)
    return model.y_mean + model.y_scale * (feats @ model.u)


def instrument_prediction(model: StructuralModel, z: Mat, o: Optional[Mat] = None) -> Mat:
    """u^T V phi(z[, o]): the model's prediction of the outcome from the instrument side."""
    if model.phi is None or model.stage1 is None:
        raise MissingDataError("model carries no stage-1 solution")
    inputs = np.asarray(z, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if o is not None:
        inputs = np.hstack([inputs, np.atleast_2d(np.asarray(o, dtype=np.float64).reshape(inputs.shape[0], -1))])
    phi = with_intercept(featurize(model.phi, inputs), model.add_intercept)
    predicted = phi @ model.stage1.V.T
    if model.xi is not None:
        if o is None:
            raise MissingDataError("model uses observables; instrument prediction needs o")
        xi = with_intercept(featurize(model.xi, o), model.add_intercept)
        predicted = rowwise_tensor_product(predicted, xi)
    return model.y_mean + model.y_scale * (predicted @ model.u)


def mse(predictions: Mat, truth: Mat) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if predictions.shape != truth.shape:
        raise DimensionMismatchError(f"{predictions.shape[0]} predictions for {truth.shape[0]} targets")
    return float(np.mean((predictions - truth) ** 2))
