"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ContractError(ValueError):
    """A call violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one was required."""


class InputError(ValueError):
    """Malformed user-supplied data (timestamps, smoothing weights, ...)."""


class FormatError(ValueError):
    """A file on disk does not follow the expected layout."""
