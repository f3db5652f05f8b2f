"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class NumericError(ArithmeticError):
    """A computation produced, or would produce, a non-finite value."""


class UnknownConditionError(KeyError):
    """A condition label is not defined by the mixture model."""
