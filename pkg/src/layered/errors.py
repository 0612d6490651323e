"""
Exception types raised by the layered control library.
"""

from __future__ import annotations


class LayeredError(ValueError):
    """Base class; a ValueError so callers catching bad input keep working."""


class ConfigurationError(LayeredError):
    pass


class DimensionError(LayeredError):
    pass


class IllConditionedError(LayeredError):
    pass


class DegenerateProblemError(LayeredError):
    pass


class InfeasibleError(LayeredError):
    pass


class PerturbationTooLargeError(LayeredError):
    pass


class InvalidArgumentError(LayeredError):
    pass
