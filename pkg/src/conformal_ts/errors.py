"""Exception hierarchy shared by every module of the package."""


class ConformalTSError(Exception):
    """Base class for all package errors."""


class DimensionError(ConformalTSError, ValueError):
    """Array shapes disagree with each other or with the declared dims."""


class ValidationError(ConformalTSError, ValueError):
    """Input values violate a precondition (NaN, out-of-range parameter, ...)."""


class ParameterError(ValidationError):
    """A scalar hyperparameter lies outside its admissible range."""


class FormatError(ConformalTSError):
    """A binary tensor file is malformed.

    Parameters
    ----------
    message : str
        Human readable description.
    offset : int or None
        Byte offset in the file at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ParseError(ConformalTSError, ValueError):
    """A text (CSV) file could not be parsed."""

    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"col {col}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class InsufficientDataError(ConformalTSError, ValueError):
    """Not enough samples to carry out the requested computation."""


class CheckpointError(ConformalTSError):
    """A saved quantile model cannot be restored."""


class ProtocolError(ConformalTSError, RuntimeError):
    """Calibrator stepped out of order or without a required observation."""


class ConfigError(ConformalTSError, ValueError):
    """Run configuration is invalid (unknown key, bad value, missing input)."""
