"""Bidirectional-transformer sequential recommendation with multi-pair
contrastive learning: data preparation, model, objectives, training loop,
whole-catalog evaluation and a CLI."""

from .errors import CbitError, ConfigError, DataError, NumericError
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CbitError",
    "ConfigError",
    "DataError",
    "NumericError",
    "Tensor",
    "__version__",
]
