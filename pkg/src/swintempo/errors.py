"""Exception hierarchy shared across the package."""


class SwinTempoError(Exception):
    """Base class for all package errors."""


class ValidationError(SwinTempoError, ValueError):
    """An input violates a documented invariant."""


class FormatError(SwinTempoError, ValueError):
    """A file on disk does not follow its format."""


class ConfigError(ValidationError):
    """A model or run configuration is inconsistent."""


class GenerationError(SwinTempoError, RuntimeError):
    """Phantom generation could not satisfy its constraints."""


class ChecksumError(FormatError):
    """Stored content does not match its recorded checksum."""


class IncompatibleCheckpointError(SwinTempoError):
    """A checkpoint cannot be loaded into the requested configuration."""


class TrainingError(SwinTempoError, RuntimeError):
    """Optimization hit a non-recoverable state (e.g. non-finite loss)."""
