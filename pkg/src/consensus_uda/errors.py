"""Exception hierarchy shared by all modules.

Everything raised for bad input data derives from :class:`DataError`, which
the CLI turns into exit code 3.
"""


class DataError(Exception):
    """Input data or file content is invalid."""


class ConfigError(DataError):
    """Taxonomy/mapping config is malformed or inconsistent."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """A raster or model file does not follow its binary format."""


class LabelError(DataError):
    """A label map holds an id outside the valid range."""


class ShapeError(DataError, ValueError):
    """Array dimensions disagree."""


class UndefinedClassError(DataError):
    """A class requested for mIoU has no support and no predictions."""


class NonFiniteGradientError(ArithmeticError):
    """An optimizer step received NaN or inf in some parameter block."""
