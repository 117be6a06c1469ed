"""Exception taxonomy shared across the package.

Every error raised by madkit derives from MadkitError so callers can catch
one base class.  The CLI maps subfamilies to exit codes: configuration
problems exit 2, data problems exit 3, numerical aborts exit 4.
"""


class MadkitError(Exception):
    """Base class for all madkit errors."""


class ConfigError(MadkitError):
    """Malformed or inconsistent run configuration."""


class ParameterError(ConfigError):
    """A function argument is outside its documented domain."""


class UsageError(MadkitError):
    """An API was called in a way its contract forbids."""


class ValidationError(MadkitError):
    """Runtime data failed an invariant check (e.g. non-normalized input)."""


class DataError(MadkitError):
    """Input data is malformed, inconsistent, or missing."""


class GeometryError(DataError):
    """Image or patch geometry violates a structural requirement."""


class ChecksumError(DataError):
    """A stored blob failed its integrity check or was truncated."""


class SchemaError(DataError):
    """A container or config declares an unexpected schema."""


class GenerationError(MadkitError):
    """Synthetic data generation could not satisfy its constraints."""


class StateError(MadkitError):
    """Internal state violated an invariant that should hold by construction."""


class NumericalAbort(MadkitError):
    """Training produced a non-finite value; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
