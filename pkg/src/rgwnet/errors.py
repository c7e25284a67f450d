"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array sizes incompatible with the requested operation."""


class InvalidParameterError(ValueError):
    """Parameter values outside the valid domain (pole guard, Nyquist, ...)."""


class DataError(ValueError):
    """Dataset or manifest contents unusable."""


class FormatError(ValueError):
    """File content not in a supported format."""


class ConfigError(ValueError):
    """Configuration inconsistent with the data or a checkpoint."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; carries the offending batch index."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class StateError(RuntimeError):
    """Operation invoked without the cached state it depends on."""
