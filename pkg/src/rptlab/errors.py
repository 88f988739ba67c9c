"""Exception types shared across the package."""


class RPTError(Exception):
    """Base class for all errors raised by rptlab."""


class DimensionError(RPTError, ValueError):
    pass


class ContractError(RPTError, ValueError):
    """A caller violated a precondition (empty input, non-scalar loss, ...)."""


class ConfigError(RPTError, ValueError):
    pass


class LengthError(RPTError, ValueError):
    pass


class NumericError(RPTError, ArithmeticError):
    """Non-finite values where finite ones are required."""
