"""Exception types shared across the package."""


class ReproError(Exception):
    """Base class for all package errors."""


class ValidationError(ReproError, ValueError):
    """Invalid argument or input data."""


class DimensionError(ValidationError):
    """Shape mismatch. ``axis`` names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ModeError(ReproError):
    """Operation not allowed for the model's mode (train vs deploy)."""


class ModelFileError(ReproError):
    """Base for model file parse failures."""


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class DatasetError(ValidationError):
    """Dataset layout problem; ``label`` names the class concerned."""

    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label
