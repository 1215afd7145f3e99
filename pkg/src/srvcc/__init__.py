"""Variational co-clustering with mixture priors, importance-weighted
bounds and low-variance gradient estimators, in plain numpy."""
from .data import (DataMatrix, SyntheticSpec, load_matrix, preprocess, save_matrix,
                   synth_checkerboard)
from .errors import (ConfigError, DataError, DimensionError, NumericalError, SrvccError)
from .metrics import accuracy_hungarian, nmi
from .trainer import CoClusterResult, LossBreakdown, TrainConfig, fit

__all__ = [
    "CoClusterResult", "ConfigError", "DataError", "DataMatrix", "DimensionError",
    "LossBreakdown", "NumericalError", "SrvccError", "SyntheticSpec", "TrainConfig",
    "accuracy_hungarian", "fit", "load_matrix", "nmi", "preprocess", "save_matrix",
    "synth_checkerboard",
]
__version__ = "0.1.0"
