"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all package errors."""


class DimensionError(Error, ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ContractError(Error, ValueError):
    """An operation was invoked in a way its contract forbids."""


class NumericError(Error, ArithmeticError):
    """A forward value or gradient became NaN or Inf."""


class LabelError(Error, ValueError):
    """A class or attribute label is outside its valid range."""


class FormatError(Error, ValueError):
    """A serialized file is malformed."""


class DeterminismError(Error, RuntimeError):
    """Two computations that must agree bitwise did not."""
