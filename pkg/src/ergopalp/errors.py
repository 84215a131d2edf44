"""Exception hierarchy shared by all modules."""


class PalpationError(Exception):
    """Base class for all errors raised by ergopalp."""


class InvalidArgument(PalpationError, ValueError):
    pass


class OutOfDomain(PalpationError, ValueError):
    pass


class DegenerateDensity(PalpationError, ValueError):
    """A density with zero (or non-positive) integral cannot be normalised."""


class DegenerateTarget(PalpationError, ValueError):
    pass


class IllConditionedKernel(PalpationError, ArithmeticError):
    """Cholesky factorisation of the kernel matrix failed."""


class InvalidParameter(PalpationError, ValueError):
    pass


class InvalidPenetration(PalpationError, ValueError):
    pass


class InvalidProfile(PalpationError, ValueError):
    pass


class FilterDivergence(PalpationError, ArithmeticError):
    """EKF state became non-finite; the caller should reset the filter."""


class NumericalFailure(PalpationError, ArithmeticError):
    pass


class NoCluster(PalpationError, ValueError):
    """2-means is undefined on a grid with a single distinct value."""


class ConfigError(PalpationError, ValueError):
    def __init__(self, message, path=None, key=None, line=None):
        self.path = path
        self.key = key
        self.line = line
        where = []
        if path is not None:
            where.append(str(path) if line is None else f"{path}:{line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class UndefinedMetric(PalpationError, ValueError):
    """A ratio metric has an empty denominator (e.g. sensitivity with no positives)."""
