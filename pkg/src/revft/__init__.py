"""Reversible adapters for memory-efficient fine-tuning, in NumPy."""

from revft.exceptions import (
    ConfigError,
    NonFiniteError,
    PrecisionMismatch,
    RevftError,
    ScalingDegenerate,
    ShapeMismatch,
)
from revft.reversible import MeftKind, ScalingConfig, build_meft_layer, rev_backward, rev_forward, rev_inverse
from revft.tensor import Precision, make_rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "NonFiniteError", "PrecisionMismatch", "RevftError", "ScalingDegenerate",
    "ShapeMismatch", "MeftKind", "ScalingConfig", "build_meft_layer", "rev_backward", "rev_forward",
    "rev_inverse", "Precision", "make_rng", "__version__",
]
