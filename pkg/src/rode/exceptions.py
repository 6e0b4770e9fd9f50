"""Exception hierarchy shared by every rode module."""


class RodeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RodeError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(RodeError, ValueError):
    """A configuration value violates a construction precondition."""


class InputError(RodeError, ValueError):
    """Token input is malformed (too long, out of vocabulary, empty)."""


class DataError(RodeError, ValueError):
    """A data record violates its invariants."""


class UndefinedMetricError(RodeError, ValueError):
    """A metric is undefined for the given inputs."""


class UsageError(RodeError, ValueError):
    """An API was called outside its valid domain."""


class NumericalError(RodeError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class TrainingDivergedError(RodeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path
