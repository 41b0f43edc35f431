"""Exception types shared across the package."""


class EcgCineError(Exception):
    """Base class for all package errors."""


class ParameterError(EcgCineError, ValueError):
    """A parameter is outside its allowed range."""


class ShapeError(EcgCineError, ValueError):
    """An array does not have the expected shape."""


class AlignmentError(EcgCineError, ValueError):
    """No usable cardiac cycle could be found."""


class DataError(EcgCineError, ValueError):
    """A dataset or split is empty or too small."""


class DependencyError(EcgCineError, FileNotFoundError):
    """An upstream artifact required by a stage is missing."""


class ConfigError(EcgCineError, ValueError):
    """A configuration value is malformed; ``field`` names the dotted path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointVersionError(EcgCineError, ValueError):
    """A checkpoint was written by an incompatible format version."""
