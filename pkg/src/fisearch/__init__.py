"""Feature-importance explanation search under a forward/backward pass budget."""

from .core import (
    BudgetMeter,
    Capability,
    Direction,
    ExplanationMask,
    FISearchError,
    Instance,
    SparsitySpec,
)
from .metrics import ObjectiveSpec, Scale, comp, suff, woe
from .replace import ReplaceFn, ReplaceKind, fit_imputer
from .toymodel import SyntheticCorpus, ToyClassifier, TrainConfig, generate_corpus, train

__version__ = "0.1.0"

__all__ = [
    "BudgetMeter",
    "Capability",
    "Direction",
    "ExplanationMask",
    "FISearchError",
    "Instance",
    "ObjectiveSpec",
    "ReplaceFn",
    "ReplaceKind",
    "Scale",
    "SparsitySpec",
    "SyntheticCorpus",
    "ToyClassifier",
    "TrainConfig",
    "comp",
    "fit_imputer",
    "generate_corpus",
    "suff",
    "train",
    "woe",
]
