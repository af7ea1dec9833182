# Domain types for the DFIV toolkit
from .rng import RngStream
from .features import (
    Activation, AdamState, EmptyFeatures, FeatureMap, Featurizer, FixedFeatures, GradBuffer,
    IdentityFeatures, InputScaler, Mat, PolynomialFeatures, RandomFourierFeatures, TabularFeatures,
)
from .iv import EvaluationGrid, IvDataset, JointTriples, Stage1Sol, StructuralModel, SyntheticData
from .mdp import MdpSpec, Policy, TransitionDataset
from .training import IterationRecord, TrainingLog

__all__ = [
    "RngStream",
    "Activation", "AdamState", "EmptyFeatures", "FeatureMap", "Featurizer", "FixedFeatures", "GradBuffer",
    "IdentityFeatures", "InputScaler", "Mat", "PolynomialFeatures", "RandomFourierFeatures", "TabularFeatures",
    "EvaluationGrid", "IvDataset", "JointTriples", "Stage1Sol", "StructuralModel", "SyntheticData",
    "MdpSpec", "Policy", "TransitionDataset",
    "IterationRecord", "TrainingLog",
]
