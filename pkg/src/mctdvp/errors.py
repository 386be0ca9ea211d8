"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class MctdvpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MctdvpError, ValueError):
    """An argument violates a documented precondition on its value."""


class DegenerateStateError(MctdvpError, ValueError):
    """A state with zero (or non-finite) norm where a physical state is required."""


class PreconditionError(MctdvpError, ValueError):
    """A structural precondition (gauge, anchoring, dimensions) is violated."""


class DenseCapExceeded(MctdvpError, ValueError):
    """A dense representation would exceed the configured size cap."""


class TrajectoryFailure(MctdvpError, RuntimeError):
    """A stochastic trajectory collapsed; carries the simulation time of the failure."""

    def __init__(self, time: float, message: str = "state norm collapsed") -> None:
        super().__init__(f"{message} at t={time:.17g}")
        self.time = time


class EnsembleFailure(MctdvpError, RuntimeError):
    """Every sample of an ensemble failed."""


class CheckpointFormatError(MctdvpError, ValueError):
    """A checkpoint file is truncated, corrupt, or of an unknown version."""
