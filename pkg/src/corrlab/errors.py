"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so keep the classes distinct.
"""


class CorrlabError(Exception):
    pass


class ConfigError(CorrlabError):
    pass


class PreconditionError(CorrlabError, ValueError):
    """An input violates a documented precondition (guards, compatibility)."""


class AdmissibilityError(PreconditionError):
    """Test-function support does not fit in the torus fundamental domain."""

    def __init__(self, message, min_L=None):
        super().__init__(message)
        self.min_L = min_L


class SizeGuardError(PreconditionError):
    pass


class SingularityError(PreconditionError):
    pass


class ConvergenceError(CorrlabError):
    """Iterative solve did not reach its tolerance; carries the SolveReport."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class QuadratureError(CorrlabError):
    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class DegenerateDistribution(CorrlabError):
    """Sample set has zero spread, so it cannot be studentized."""
