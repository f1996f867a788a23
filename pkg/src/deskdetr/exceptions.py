"""Exception hierarchy shared across the package."""


class DeskDetrError(Exception):
    """Base class for all package errors."""


class DimensionError(DeskDetrError, ValueError):
    """Shapes are incompatible with the requested operation."""


class NumericError(DeskDetrError, ArithmeticError):
    """An operation produced or would produce a non-finite value."""


class ParameterError(DeskDetrError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigurationError(DeskDetrError, ValueError):
    """A configuration object is inconsistent."""


class GenerationError(DeskDetrError, RuntimeError):
    """Synthetic scene generation could not place the requested shapes."""


class DatasetFormatError(DeskDetrError, ValueError):
    """An annotation file violates the expected schema."""


class TrainingDivergedError(DeskDetrError, RuntimeError):
    """The training loss became non-finite."""
