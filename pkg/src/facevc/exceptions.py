"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes: validation problems exit with 2,
I/O and file-format problems with 3, numeric failures with 4.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible."""


class ConfigurationError(ValidationError):
    """A model or training configuration is unusable."""


class NumericError(ArithmeticError):
    """A computation produced, or was handed, non-finite values."""


class FormatError(OSError):
    """A file on disk is corrupt or does not follow its declared format."""

    def __init__(self, message, position=None, path=None):
        self.position = position
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if position is not None:
            where.append(f"byte {position}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
