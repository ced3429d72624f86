"""Recurrent networks with an orthogonally factorized, spectrum-bounded transition matrix."""

from .config import ConfigError, ExperimentConfig, parse_config
from .rnncell import Batch, Nonlinearity, RnnModel, backward, forward
from .spectral import FactorizedTransition

__version__ = "0.1.0"

__all__ = [
    "Batch", "ConfigError", "ExperimentConfig", "FactorizedTransition", "Nonlinearity",
    "RnnModel", "backward", "forward", "parse_config",
]
