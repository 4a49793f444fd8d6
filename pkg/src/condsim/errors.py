"""Error classes shared across the package.

The three classes map one-to-one onto the CLI's nonzero exit codes, so raising
the right one matters for scripted callers.
"""


class CondsimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CondsimError):
    """Invalid configuration: bad shapes, bad hyperparameters, bad flags."""

    exit_code = 2


class DataError(CondsimError):
    """Structurally valid request on data that cannot support it."""

    exit_code = 3


class ParseError(DataError):
    """Malformed input file; message carries the offending line number."""


class DivergenceError(CondsimError):
    """Training produced a non-finite loss."""

    exit_code = 1
