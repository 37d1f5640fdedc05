"""Exception hierarchy shared across the package."""


class QupedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(QupedError, ValueError):
    """Invalid configuration: bad shapes, ranges, unknown keys."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(QupedError, FloatingPointError):
    """A loss, gradient or parameter became non-finite during training."""


class FeasibilityError(QupedError, ValueError):
    """A partition request cannot be satisfied by the dataset."""


class IDXFormatError(QupedError, ValueError):
    """Base class for IDX parse failures."""


class BadMagicError(IDXFormatError):
    pass


class TruncatedFileError(IDXFormatError):
    pass


class CountMismatchError(IDXFormatError):
    pass
