"""Active access-control plugin for small CNNs.

A protected model injects a sparse universal feature-space perturbation
for every query by default and bypasses it only for inputs carrying a
valid feature-domain credential.
"""

from . import credential, data, gsuap, harness, nn, plugin, serialize, tensor
from .errors import (
    DataIOError,
    EvalFailure,
    FormatError,
    LymphError,
    NumericalError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "credential",
    "data",
    "gsuap",
    "harness",
    "nn",
    "plugin",
    "serialize",
    "tensor",
    "LymphError",
    "UsageError",
    "DataIOError",
    "FormatError",
    "NumericalError",
    "EvalFailure",
    "ShapeError",
]
