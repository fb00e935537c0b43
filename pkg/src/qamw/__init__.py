"""Pair-wise weight quantization codec with Hadamard rotation and 2D Lloyd codebooks."""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    DimensionError,
    DomainError,
    EncodingError,
    FormatError,
    IntegrityError,
    QamwError,
)
from .rotation import RotationPlan, SignMask, forward_rotate, inverse_rotate, plan_rotation

__all__ = [
    "CalibrationError",
    "DimensionError",
    "DomainError",
    "EncodingError",
    "FormatError",
    "IntegrityError",
    "QamwError",
    "RotationPlan",
    "SignMask",
    "forward_rotate",
    "inverse_rotate",
    "plan_rotation",
]
