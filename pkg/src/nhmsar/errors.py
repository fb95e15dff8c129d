"""Exception hierarchy shared by all modules."""


class NhmsarError(Exception):
    """Base class for every error raised by this package."""


class InvalidParams(NhmsarError, ValueError):
    """Parameter values outside the admissible set."""


class DimensionMismatch(NhmsarError, ValueError):
    pass


class ShapeMismatch(NhmsarError, ValueError):
    pass


class NonFiniteDensity(NhmsarError, FloatingPointError):
    """A transition or emission log-density evaluated to NaN or +inf."""


class DegenerateFilter(NonFiniteDensity):
    """Every regime assigns zero density to an observation."""


class TooLarge(NhmsarError, ValueError):
    pass


class SingularDesign(NhmsarError, ArithmeticError):
    """Weighted normal equations are rank deficient."""


class DefectiveBasis(NhmsarError, ArithmeticError):
    """The basis companion matrix has no full set of eigenvectors."""


class SingularSigma(NhmsarError, ValueError):
    pass


class OptimFailed(NhmsarError, RuntimeError):
    pass


class NoWetData(NhmsarError, ValueError):
    pass


class NewtonDiverged(NhmsarError, RuntimeError):
    pass


class AllStartsFailed(NhmsarError, RuntimeError):
    pass


class InconsistentData(NhmsarError, ValueError):
    pass


class IdentifiabilityWarning(UserWarning):
    """Parameters violate a sufficient condition for identifiability."""
