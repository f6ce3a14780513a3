"""Exception hierarchy.

Validation problems (bad shapes, invalid options) and numerical failures
(non-convergence, singular information) are kept apart so the CLI can map
them to distinct exit codes.
"""


class PSTError(Exception):
    """Base class for all errors raised by pstest."""


class ValidationError(PSTError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(PSTError, ArithmeticError):
    """A numerical procedure failed on otherwise valid inputs."""


class ConvergenceError(NumericalError):
    """An iterative fit did not converge.

    The number of iterations used is available as ``iterations``.
    """

    def __init__(self, message, iterations):
        super().__init__(message)
        self.iterations = iterations


class PerfectSeparationError(ConvergenceError):
    """Logistic coefficients diverge because the outcome is separable."""


class SingularInformationError(NumericalError):
    """An information matrix that must be inverted is (numerically) singular."""
