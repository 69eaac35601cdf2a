class ShapeError(ValueError):
    """Raised when tensors handed to a module disagree on an axis."""


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass
