"""Neural stability certificates and monotone frequency controllers
for lossy swing-equation power networks."""

from . import controller, grid_model, gradcore, lyapunov, policy_training
from .errors import (
    EquilibriumError,
    ReductionError,
    TrainingDivergedError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "controller",
    "grid_model",
    "gradcore",
    "lyapunov",
    "policy_training",
    "EquilibriumError",
    "ReductionError",
    "TrainingDivergedError",
    "ValidationError",
]
