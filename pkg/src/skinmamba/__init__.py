"""Hybrid state-space / convolutional encoder-decoder for lesion segmentation."""

from .exceptions import (
    CheckpointError,
    ConfigError,
    NumericError,
    PairingError,
    SkinMambaError,
)

__version__ = "0.1.0"

__all__ = [
    "SkinMambaError",
    "ConfigError",
    "NumericError",
    "PairingError",
    "CheckpointError",
    "__version__",
]
