"""Exception hierarchy shared by every module."""


class PruneError(Exception):
    """Base class for all errors raised by admm_prune."""


class DimensionError(PruneError, ValueError):
    """Operand shapes do not agree."""


class InputError(PruneError, ValueError):
    """An argument is outside its valid domain."""


class ConfigError(PruneError, ValueError):
    """A configuration value (budget, tolerance, penalty) is invalid."""


class StateError(PruneError, RuntimeError):
    """An object was used out of order, e.g. a stale forward cache."""


class NumericError(PruneError, ArithmeticError):
    """Training diverged (NaN or Inf loss)."""


class FormatError(PruneError, ValueError):
    """A file does not follow the expected binary layout."""


class LengthError(FormatError):
    """A file is shorter or longer than its header declares."""


class ConsistencyError(FormatError):
    """Two files that must agree (images/labels) do not."""
