"""CNN training and evaluation engine for four-class leukemia smear classification."""

from .data import CLASS_NAMES, Dataset
from .models import build_custom_cnn, build_mobilenet_v2, freeze_backbone
from .network import Model, ModelSpec
from .tensor import Rng

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "Dataset",
    "Model",
    "ModelSpec",
    "Rng",
    "build_custom_cnn",
    "build_mobilenet_v2",
    "freeze_backbone",
]
