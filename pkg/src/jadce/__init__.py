"""Joint activity detection and channel estimation with learned proximal networks.

The package models grant-free random access as recovery of a group-row-sparse
complex matrix, solved in the real-lifted domain by MCP-regularized proximal
iterations (ISTA-style) and by trainable unfolded networks.
"""

from jadce.errors import (
    CheckpointError,
    ConvergenceError,
    InfeasibleConstraintError,
    InsufficientDataError,
    JadceError,
    ParameterError,
    RankDeficiencyError,
    TrainingAbort,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConvergenceError",
    "InfeasibleConstraintError",
    "InsufficientDataError",
    "JadceError",
    "ParameterError",
    "RankDeficiencyError",
    "TrainingAbort",
    "UndefinedMetricError",
]
