"""Exception taxonomy shared across the package.

Each class marks a distinct failure mode so callers (and tests) can tell
a bad shape from a bad file from a bad config without string matching.
"""


class LayerVisionError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LayerVisionError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class LabelError(LayerVisionError, ValueError):
    """A class/position label is outside its valid range."""


class ContractError(LayerVisionError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(LayerVisionError, ValueError):
    """A run/configuration value is invalid."""


class FormatError(LayerVisionError, ValueError):
    """An on-disk artifact is malformed (bad magic, truncation, drift)."""


class AlignmentError(LayerVisionError, ValueError):
    """Predictions/golds/window sets do not line up one-to-one."""


class DeterminismError(LayerVisionError, RuntimeError):
    """A function expected to be deterministic produced differing values."""


class NumericsError(LayerVisionError, ArithmeticError):
    """An operation produced NaN or Inf."""
