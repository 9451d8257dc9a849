"""Exception types shared across the package."""


class FairdiffError(Exception):
    """Base class for all package errors."""


class ParseError(FairdiffError):
    """A raw data file line could not be parsed."""


class ValidationError(FairdiffError):
    """Input data violates a documented invariant."""


class ConfigError(FairdiffError):
    """Invalid configuration or hyperparameter values."""


class TrainingError(FairdiffError):
    """Training aborted (non-finite loss or gradient)."""
