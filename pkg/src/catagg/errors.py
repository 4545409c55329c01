"""Exception taxonomy shared across the package."""


class CatAggError(Exception):
    """Base class for all package errors."""


class DimensionError(CatAggError, ValueError):
    """Tensor shapes or extents are incompatible with the operation."""


class ArgumentError(CatAggError, ValueError):
    """A value-level argument is invalid (empty list, out-of-range point, ...)."""


class ConfigError(CatAggError, ValueError):
    """A configuration is internally inconsistent or unsupported."""


class StateError(CatAggError, RuntimeError):
    """An operation was called in the wrong mode or lifecycle state."""


class NumericError(CatAggError, ArithmeticError):
    """A forward pass produced non-finite values."""


class CheckpointError(CatAggError, RuntimeError):
    """A checkpoint or tensor file could not be read or does not match."""


class UsageError(CatAggError, ValueError):
    """Bad command-line usage; mapped to exit code 2 by the CLI."""
