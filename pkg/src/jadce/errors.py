"""Exception hierarchy."""


class JadceError(Exception):
    """Base class for all package errors."""


class ParameterError(JadceError, ValueError):
    """Invalid argument, shape mismatch or violated parameter invariant."""


class ConvergenceError(JadceError):
    """An iterative routine hit its iteration cap.

    The last estimate is kept on ``last_estimate`` so callers can decide
    whether it is usable anyway.
    """

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class InfeasibleConstraintError(JadceError):
    """The unit-diagonal weight constraint has no solution (zero column)."""


class RankDeficiencyError(JadceError):
    """A Gram matrix that must be inverted is numerically singular."""


class UndefinedMetricError(JadceError):
    """Metric is undefined for the given input (e.g. all-zero reference)."""


class InsufficientDataError(JadceError):
    """Not enough usable points for a fit."""


class CheckpointError(JadceError):
    """Checkpoint or dataset file is unreadable, truncated or incompatible."""


class TrainingAbort(JadceError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last finite state for diagnosis, ``path`` is
    set when it has been written to disk.
    """

    def __init__(self, message, checkpoint=None, path=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.path = path
