"""Decoupled neural systems for cluttered, irregularly sampled sequences.

Sub-system controlled differential equations driven by spline control paths
interact through a row-stochastic meta-system kept on the simplex by softmax
or sparsemax projections. The package ships its own reverse-mode autodiff,
dataset generators for gravitational three-body and spring systems, a
training harness and a command-line interface.
"""

from .errors import ContractError, DimensionError, FormatError, InputError, NumericError
from .model import DnsConfig, DnsParameters, init_params
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "FormatError",
    "InputError",
    "NumericError",
    "DnsConfig",
    "DnsParameters",
    "init_params",
    "TrainConfig",
    "evaluate",
    "train",
]
