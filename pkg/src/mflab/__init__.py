"""Numerical laboratory for mean-field system-reservoir dynamics.

Exact finite-size propagation, the infinite-reservoir effective unitary
dynamics, moment factorization checks, and the associated spectral and
decay studies, all at desk scale.
"""

from .errors import (
    ConfigError,
    MFLabError,
    QuadratureError,
    ResourceLimitError,
    ToleranceError,
    ValidationError,
)
from .operators import DensityMatrix, Operator
from .config import ExperimentConfig, load_config, parse_config

__all__ = [
    "ConfigError",
    "DensityMatrix",
    "ExperimentConfig",
    "MFLabError",
    "Operator",
    "QuadratureError",
    "ResourceLimitError",
    "ToleranceError",
    "ValidationError",
    "load_config",
    "parse_config",
]

__version__ = "0.1.0"
