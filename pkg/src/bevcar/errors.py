"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or tensor shape is inconsistent with what a module expects."""


class DatasetError(RuntimeError):
    """A sample directory, calibration file, or annotation is missing or malformed."""


class GenerationError(RuntimeError):
    """Scene synthesis could not satisfy its constraints (e.g. vehicle placement)."""


class CheckpointError(RuntimeError):
    """A checkpoint archive is unreadable, from a different format version, or
    was written under an incompatible configuration."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or an otherwise unrecoverable state."""
