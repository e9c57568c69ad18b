"""Exception types shared across the package."""


class AdaptSenseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AdaptSenseError):
    """A configuration value is invalid (bad dimension, range, or option)."""


class ContractError(AdaptSenseError):
    """A caller violated a documented precondition."""


class ShapeError(AdaptSenseError):
    """An array does not have the expected shape."""


class DataError(AdaptSenseError):
    """Input data is malformed (out-of-range label, too-short signal, empty traces)."""


class GraphError(AdaptSenseError):
    """A layer graph is internally inconsistent."""


class EmptySelectionError(AdaptSenseError):
    """Fusion was asked to combine an all-masked set of features."""


class DivergenceError(AdaptSenseError):
    """Training produced a non-finite loss."""
