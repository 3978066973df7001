"""Multi-task few-shot metric learning with semantic cross-attention.

A small, self-contained research codebase: a numpy-backed autodiff engine
(tensor), a four-block convolutional embedding network (backbone), fusion
of visual patches with word-vector projections (fusion), a prototype
metric head (metric), soft semantic targets and auxiliary losses
(semantics), episodic data plumbing and a synthetic benchmark (episodes),
and the training/evaluation stack on top (model, training, cli).
"""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    MissingTokenError,
    ParameterError,
    SemcrossError,
    VerificationError,
)
from .tensor import Tensor, backward, no_grad, precision

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "precision",
    "SemcrossError",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "FormatError",
    "MissingTokenError",
    "CapacityError",
    "ConfigError",
    "DivergenceError",
    "VerificationError",
    "__version__",
]
