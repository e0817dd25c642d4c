"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """A run configuration is malformed or references unknown keys."""


class DataFormatError(ValueError):
    """A dataset file violates its declared format."""


class InfeasibleScaleError(ValueError):
    """A scale vector lies outside its convention's box bounds."""


class EnumerationLimitError(ValueError):
    """The gated layer is too wide for exhaustive mask enumeration."""


class DivergenceError(RuntimeError):
    """An optimization loop produced a non-finite objective."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class RepairError(RuntimeError):
    """Feasibility repair failed to converge."""
