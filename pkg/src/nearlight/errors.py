"""Exception types raised across the package."""


class NearlightError(Exception):
    """Base class for all package errors."""


class InvalidDepthError(NearlightError, ValueError):
    pass


class EmptyMaskError(NearlightError, ValueError):
    pass


class ParameterError(NearlightError, ValueError):
    pass


class SingularityError(NearlightError, ValueError):
    pass


class ShapeMismatchError(NearlightError, ValueError):
    pass


class InsufficientLightsError(NearlightError, ValueError):
    pass


class NumericError(NearlightError, ArithmeticError):
    pass


class MissingFileError(NearlightError, FileNotFoundError):
    pass


class UnitMismatchError(NearlightError, ValueError):
    pass


class FormatError(NearlightError, ValueError):
    pass


class DivergenceError(NearlightError, RuntimeError):
    pass
