"""Exception types shared across the package."""


class MatforgeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MatforgeError, ValueError):
    """A network, layer or run was configured inconsistently."""


class StateError(MatforgeError, RuntimeError):
    """An operation was called on a layer in the wrong state."""


class NonFiniteError(MatforgeError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class TrainingError(MatforgeError, RuntimeError):
    """Training had to abort; the message carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class WeightsError(MatforgeError, OSError):
    """Weight files are missing, corrupt or incompatible."""


class DatasetError(MatforgeError, ValueError):
    """Dataset construction or splitting failed."""
