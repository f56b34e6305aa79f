"""Exception hierarchy. The CLI maps these onto process exit codes."""


class CbvrError(Exception):
    """Base class for all engine errors."""

    exit_code = 4


class ConfigError(CbvrError, ValueError):
    """Invalid configuration or argument combination."""

    exit_code = 2


class DataError(CbvrError, ValueError):
    """Malformed, inconsistent or insufficient input data."""

    exit_code = 3


class IndexFormatError(DataError):
    """A persisted index or descriptor file could not be decoded.

    ``code`` distinguishes the failure: ``"bad-magic"``, ``"bad-version"``,
    ``"bad-codec"``, ``"truncated"`` or ``"corrupt"``.
    """

    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class LeakageError(CbvrError):
    """Test-split labels were requested while training or learning weights."""

    exit_code = 4
