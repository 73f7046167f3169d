"""Shared exception types."""


class RidgError(Exception):
    """Base class for all library errors."""


class DimensionError(RidgError):
    """Operand shapes disagree with an operation's contract."""


class ValidationError(RidgError):
    """Input values outside the documented domain (labels, indices, ...)."""


class ConfigError(RidgError):
    """A configuration value is missing, malformed, or out of range."""


class ContractError(RidgError):
    """An API was called in a way its contract forbids."""


class SchemaError(RidgError):
    """A file's structure does not match the expected schema."""


class CsvParseError(RidgError):
    """A CSV cell could not be parsed; the message carries the line number."""


class DivergenceError(RidgError):
    """Training produced a non-finite value; carries the failing step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AggregationError(RidgError):
    """Result aggregation over an empty or inconsistent group."""
