"""Exception hierarchy shared by all neurotone modules."""


class NeurotoneError(Exception):
    """Base class for all package errors."""


class ContractError(NeurotoneError):
    """A caller violated a documented precondition or shape contract."""


class ShapeError(ContractError):
    """Operand shapes do not conform; message names both shapes."""


class NumericError(NeurotoneError):
    """A computation produced non-finite values."""


class StateError(NeurotoneError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class OptimizationError(NeurotoneError):
    """An iterative optimization diverged (NaN loss)."""


class DegenerateSignalError(ContractError):
    """Input signal carries no usable energy or variance."""
