"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to.
"""


class VitisegError(Exception):
    exit_code = 1


class ConfigError(VitisegError, ValueError):
    """Invalid configuration or shape contract violated at build time."""

    exit_code = 1


class UsageError(VitisegError, ValueError):
    """An API was called with arguments it does not accept."""

    exit_code = 1


class DataError(VitisegError):
    """Missing, malformed, or inconsistent input data."""

    exit_code = 2


class ImageIOError(DataError, OSError):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class ModelLoadError(DataError):
    pass


class ConfigMismatchError(ModelLoadError):
    pass


class NumericError(VitisegError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward pass."""

    exit_code = 3


class DivergenceError(NumericError):
    pass


class NoSeedsError(DataError):
    """A confidence map has no confident pixels of either class."""
