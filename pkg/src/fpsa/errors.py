"""Exception hierarchy shared by every subpackage."""


class FpsaError(Exception):
    """Base class for all library errors."""


class ShapeError(FpsaError, ValueError):
    """Operand shapes or axes are inconsistent."""


class ConfigError(FpsaError, ValueError):
    """Invalid configuration value."""


class DataError(FpsaError, ValueError):
    """Malformed or out-of-range input data."""


class NumericalError(FpsaError, ArithmeticError):
    """A computation produced NaN or Inf.

    ``iteration`` is set when the failure happened inside a fixed-point solve,
    ``trace`` optionally carries the residual history up to that point.
    """

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class CheckpointError(FpsaError):
    """Checkpoint is corrupt, truncated or incompatible with the model."""
