"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class ParameterError(ValueError):
    """A scalar or configuration parameter is out of its valid range."""


class PreconditionError(RuntimeError):
    """A mathematical precondition of a check does not hold."""


class NumericError(ArithmeticError):
    """Non-finite values reached a routine that requires finite input."""
