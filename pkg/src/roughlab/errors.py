"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class RoughlabError(Exception):
    exit_code = 1


class DomainError(RoughlabError, ValueError):
    """Input outside the domain of an operation."""

    exit_code = 2


class ConfigError(DomainError):
    exit_code = 2


class NumericalError(RoughlabError, ArithmeticError):
    exit_code = 3


class ExplosionError(NumericalError):
    """The state left the finite region before the final time."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConsistencyError(NumericalError):
    """A monitored invariant (Chen identity, J J^-1 = I, ...) failed."""


class DegenerateSampleError(NumericalError):
    pass


class HypothesisViolation(RoughlabError):
    """A structural hypothesis (rank condition, theta < 2 gamma, ...) fails."""

    exit_code = 4


class NotControllableError(HypothesisViolation):
    pass


class UndefinedBoundError(HypothesisViolation):
    pass


class PrecisionError(NumericalError):
    pass
