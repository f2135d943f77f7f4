"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TranspointError(Exception):
    exit_code = 1


class InputError(TranspointError, ValueError):
    """Malformed input: bad shapes, schema violations, missing values."""

    exit_code = 2


class InsufficientStudiesError(InputError):
    """Fewer training studies than the operation needs."""

    exit_code = 5


class DegenerateError(TranspointError, ArithmeticError):
    """Numerical degeneracy (singular or ill-conditioned systems)."""

    exit_code = 3


class SingularDesignError(DegenerateError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ConditionViolation(TranspointError):
    """A transition-point positivity condition fails, so no valid tau exists."""

    exit_code = 4


class NoCrossingError(ConditionViolation):
    """Root search found no sign change in its bracket."""

    def __init__(self, message, prevailing=None):
        super().__init__(message)
        self.prevailing = prevailing


class SimulationError(TranspointError):
    exit_code = 3
