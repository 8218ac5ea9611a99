"""Exception hierarchy shared by the library and the CLI."""


class MModeSSLError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(MModeSSLError, ValueError):
    exit_code = 2


class DataError(MModeSSLError, ValueError):
    exit_code = 3


class NumericalError(MModeSSLError, FloatingPointError):
    """A NaN or Inf appeared in a computation, or a loss diverged."""

    exit_code = 4
