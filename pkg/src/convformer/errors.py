"""Exception hierarchy shared by every module."""


class ConvFormerError(Exception):
    pass


class DimensionError(ConvFormerError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(ConvFormerError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(ConvFormerError, RuntimeError):
    """An object was used before it was in a valid state."""


class ConfigError(ConvFormerError, ValueError):
    pass


class DataError(ConvFormerError, ValueError):
    pass
