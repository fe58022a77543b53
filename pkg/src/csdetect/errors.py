"""Exception types shared across the package."""


class CsdetectError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CsdetectError, ValueError):
    """Shapes or sizes of inputs are inconsistent with the operation."""


class GeometryError(CsdetectError, ValueError):
    """A projection geometry is misconfigured (e.g. an index falls off a line)."""


class SingularityError(CsdetectError, ValueError):
    """A Gram submatrix is singular or too ill-conditioned to invert.

    Carries ``condition`` — the estimated condition number at failure,
    or ``inf`` when the matrix was not invertible at all.
    """

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = float(condition)


class NumericError(CsdetectError, ValueError):
    """Non-finite values were found where finite numbers are required."""


class ConfigError(CsdetectError, ValueError):
    """A configuration value or combination of values is invalid."""


class DatasetFormatError(CsdetectError, ValueError):
    """A dataset file is malformed.

    ``offset`` is a byte offset for binary files, ``line`` a 1-based line
    number for text files; either may be None when not applicable.
    """

    def __init__(self, message, offset=None, line=None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line


class OracleError(CsdetectError, RuntimeError):
    """A verification oracle failed to converge within its budget."""
