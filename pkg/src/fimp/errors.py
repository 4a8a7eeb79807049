"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies where an operation is undefined (e.g. a zero-norm vector)."""


class InconsistentStateError(RuntimeError):
    """Internal bookkeeping disagrees with itself (e.g. a parameter has no gradient)."""


class ConfigurationError(ValueError):
    """An experiment or strategy was configured in an unusable way."""


class FeatureFileError(ValueError):
    """A feature or checkpoint file is malformed."""


class UndefinedAUCError(ValueError):
    """ROC AUC requested for a label column with a single class."""


class EvaluationError(RuntimeError):
    """No metric could be computed from the supplied batch."""
