"""Exception types shared across the package."""


class CDFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(CDFlowError, ValueError):
    """Shapes do not conform to what an operation requires."""


class DomainError(CDFlowError, ValueError):
    """An argument lies outside the domain of an operation."""


class SingularityError(CDFlowError, ArithmeticError):
    """A transform that must be invertible is (numerically) singular."""


class NumericError(CDFlowError, FloatingPointError):
    """A computation produced NaN or Inf."""


class ContractError(CDFlowError, RuntimeError):
    """A caller violated a usage precondition (e.g. non-scalar loss)."""


class DegenerateCorrelationError(CDFlowError, ValueError):
    """A statistic is undefined because one input has no variation."""


class InputError(CDFlowError, OSError):
    """A file could not be read or parsed."""
