"""Exception hierarchy shared across the package."""


class LfitError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(LfitError):
    """An API was called in a way its contract forbids."""


class DimensionError(LfitError):
    """Array shapes are incompatible with the requested operation."""


class DataError(LfitError):
    """Input data violates the dataset schema or contains invalid values."""


class VocabularyError(LfitError):
    """A categorical value or index falls outside the known vocabulary."""


class ConfigError(LfitError):
    """A configuration file or value is malformed or out of range."""


class ModelFormatError(LfitError):
    """A model file is corrupted, truncated, or of an unsupported version."""
