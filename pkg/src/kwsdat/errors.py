"""Exception hierarchy shared by every kwsdat module.

The CLI maps these onto its exit codes (config -> 1, data -> 2, numeric -> 3).
"""


class KwsError(Exception):
    """Base class for all package errors."""


class ContractError(KwsError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class RoutingError(KwsError, LookupError):
    """A datasource tag names a normalization branch that does not exist."""


class NumericError(KwsError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(KwsError, ValueError):
    """Bad configuration key or value."""

    def __init__(self, message: str, key_path: str | None = None):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class DataError(KwsError):
    """Base for errors caused by input files."""


class FormatError(DataError, ValueError):
    """A file is not in the expected container format."""


class VersionError(FormatError):
    """A file carries an unsupported format version."""


class IntegrityError(DataError):
    """A file is truncated, corrupt or missing required entries."""
