"""Recurrent multi-layer feature fusion for video temporal grounding."""

from .tensor import CounterRng, RunContext, Tensor, finite_diff_check
from .features import GroundingLabels, LayerFeatureSet, Manifest, SynthSpec
from .training import GroundingModel, TrainConfig, evaluate, train

__all__ = [
    "CounterRng",
    "GroundingLabels",
    "GroundingModel",
    "LayerFeatureSet",
    "Manifest",
    "RunContext",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "finite_diff_check",
    "train",
]
__version__ = "0.1.0"
