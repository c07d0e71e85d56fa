"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation problems (bad config, bad
inputs, schema violations) exit with 2, numerical failures (divergence,
step underflow, non-finite state) exit with 3.
"""


class DavidkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ValidationError(DavidkitError):
    """Bad inputs, configs, or schema violations."""

    exit_code = 2


class ShapeError(ValidationError):
    """Tensor/array shape mismatch, named after the offending op."""


class NumericalError(DavidkitError):
    """Optimization or integration failed numerically."""

    exit_code = 3


class NonConvergenceError(NumericalError):
    """Iterative solver diverged; carries the best iterate seen."""

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class InsufficientCorrespondencesError(ValidationError):
    """Too few 2D-3D correspondences for pose estimation."""


class DegenerateRotationError(ValidationError):
    """6D rotation input is not orthonormalizable."""
