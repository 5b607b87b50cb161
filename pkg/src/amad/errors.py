"""Exception types shared across the package."""


class AmadError(Exception):
    pass


class ShapeError(AmadError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(AmadError, ArithmeticError):
    """A NaN or non-finite value showed up where it must not."""


class ConfigError(AmadError, ValueError):
    pass


class ContractError(AmadError, ValueError):
    """A precondition on an argument's value was violated."""


class DataError(AmadError, ValueError):
    """Input data could not be parsed or is unusable."""
