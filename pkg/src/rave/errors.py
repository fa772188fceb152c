"""Exception types raised across the package."""


class RaveError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RaveError, ValueError):
    pass


class DimensionError(RaveError, ValueError):
    pass


class MaskError(RaveError, ValueError):
    """A softmax row had no admissible column."""


class DegenerateRowError(RaveError, ValueError):
    """Post-softmax recalibration clamped an entire row to zero mass."""


class TraceError(RaveError, KeyError):
    pass


class VocabularyError(RaveError, ValueError):
    pass


class DivergenceError(RaveError, FloatingPointError):
    pass


class CheckpointError(RaveError, ValueError):
    pass
