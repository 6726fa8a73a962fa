"""Desk-scale simulator for causal federated learning.

Split-learning with invariance penalties (IRM, random matching), a
shared-global-data FedAvg variant, ERM/FedAvg baselines, environment-shifted
MNIST-style datasets, and membership / property / backdoor evaluations.
"""

from causalfed.errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    InputError,
    NumericError,
    ProtocolError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConsistencyError",
    "FormatError",
    "InputError",
    "NumericError",
    "ProtocolError",
    "ShapeError",
    "StateError",
]
