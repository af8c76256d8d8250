"""Exception types shared across the pipeline."""


class SuperADError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SuperADError):
    """Invalid or inconsistent run configuration."""


class DataError(SuperADError):
    """A required input is missing or unusable."""


class FormatError(DataError):
    """A binary artifact has the wrong magic bytes or an unsupported version."""


class CorruptionError(DataError):
    """A binary artifact is truncated or carries trailing garbage."""


class ValidationError(DataError):
    """Structurally parseable data that violates an invariant."""


class DegenerateDataError(SuperADError):
    """Input carries no usable signal (e.g. zero variance everywhere)."""


class UndefinedMetricError(SuperADError):
    """The requested metric is undefined for the given inputs."""
