"""Cardinality-constrained weight pruning of small MNIST networks via ADMM."""

from admm_prune.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    PruneError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InputError",
    "NumericError",
    "PruneError",
    "StateError",
]
