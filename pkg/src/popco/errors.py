class PopcoError(Exception):
    """Base class for every error raised deliberately by this package."""


class InvalidArgument(PopcoError, ValueError):
    pass


class CorruptFile(PopcoError):
    pass


class InfeasibleSolution(PopcoError):
    pass


class TooLarge(PopcoError):
    """Instance exceeds an exact oracle's size limit."""


class BudgetTooSmall(PopcoError):
    pass


class ContractViolation(PopcoError, AssertionError):
    """A caller broke a documented precondition (e.g. stepped an infeasible action)."""


class NonFiniteGradient(PopcoError, FloatingPointError):
    pass
