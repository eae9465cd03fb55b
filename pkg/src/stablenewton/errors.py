"""Exception hierarchy shared by the package."""


class StableNewtonError(Exception):
    """Base class for all package errors."""


class DimensionError(StableNewtonError, ValueError):
    pass


class DomainError(StableNewtonError, ValueError):
    """Evaluation requested outside the domain of a function."""


class RangeError(StableNewtonError):
    """Right-hand side is not in the range of a PSD matrix."""


class NotPSDError(StableNewtonError):
    """Curvature along a search direction was negative beyond tolerance."""


class InnerSolverError(StableNewtonError):
    """Subproblem accuracy could not be reached within the inner budget.

    The best step found so far is kept on ``best_step`` (may be None).
    """

    def __init__(self, message, best_step=None, theta_achieved=None):
        super().__init__(message)
        self.best_step = best_step
        self.theta_achieved = theta_achieved


class DescentViolation(StableNewtonError):
    """Function value increased although sigma dominated the declared constant."""


class UnboundedEta(StableNewtonError):
    pass


class InsufficientSamples(StableNewtonError):
    pass


class ParseError(StableNewtonError, ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class EmptyDataError(StableNewtonError, ValueError):
    pass


class RateFitError(StableNewtonError, ValueError):
    pass


class ConfigError(StableNewtonError, ValueError):
    pass


class SigmaWarning(UserWarning):
    """sigma is below the constant the convergence guarantee needs."""
