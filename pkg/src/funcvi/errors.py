"""Exception types shared across the package."""


class FuncVIError(Exception):
    pass


class NonPositiveDefinite(FuncVIError, ValueError):
    """A covariance pivot or factorization hit a non-positive value."""


class DomainError(FuncVIError, ValueError):
    """An argument lies outside the domain of the function."""


class NonFinite(FuncVIError, FloatingPointError):
    """A quantity that must be finite (integral, objective, gradient) is not."""


class EmptyInput(FuncVIError, ValueError):
    pass


class ShapeMismatch(FuncVIError, ValueError):
    pass
