"""Exception hierarchy shared across the toolkit."""


class HydraError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(HydraError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HydraError, ValueError):
    """A documented precondition was violated."""


class DegenerateAdapterError(ContractError):
    """An adapter update has no singular directions (e.g. still zero-initialised)."""


class NumericalError(HydraError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""


class CheckpointError(HydraError):
    """A checkpoint file is malformed or fails its integrity check."""
