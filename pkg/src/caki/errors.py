"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
FingerprintMismatchError -> 4.
"""


class CakiError(Exception):
    """Base class for all package-specific errors."""


class DegenerateInputError(CakiError, ValueError):
    """Numerically meaningless input, e.g. a zero-norm vector."""


class NotFoundError(CakiError, LookupError):
    """A requested record or entry does not exist."""


class UnsupportedOperationError(CakiError, RuntimeError):
    """The backend cannot perform the requested operation."""


class EmptyBankError(CakiError, ValueError):
    """Matching was attempted against a bank with no entries."""


class FormatError(CakiError):
    """A persisted file violates its binary format.

    ``offset`` is the byte position at which the problem was detected,
    when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class FingerprintMismatchError(CakiError):
    """A bank was produced by a different encoder than the active one."""


class ConfigError(CakiError):
    """Invalid or unparseable pipeline configuration."""
