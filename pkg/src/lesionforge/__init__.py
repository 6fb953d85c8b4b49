"""Mask-conditioned lesion synthesis and segmentation augmentation."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    DataIOError,
    DegenerateOutputError,
    EstimationError,
    LesionForgeError,
    NumericError,
    PairingError,
    ValidationError,
)

__all__ = [
    "__version__",
    "LesionForgeError",
    "ConfigurationError",
    "ValidationError",
    "PairingError",
    "DataIOError",
    "DegenerateOutputError",
    "EstimationError",
    "NumericError",
    "CheckpointError",
]
