"""Exception types raised across the package."""


class JSCNError(Exception):
    """Base class for all errors raised by jscn."""


class GraphError(JSCNError, ValueError):
    """Malformed bipartite graph (isolated vertex, bad index, oversized)."""


class ConvergenceError(JSCNError, ArithmeticError):
    """The eigensolver hit its iteration cap."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual norm {residual:.3e})")
        self.residual = residual


class ShapeError(JSCNError, ValueError):
    pass


class DataError(JSCNError, ValueError):
    """Bad input data: parse failures, out-of-range ratings, empty results."""


class NumericalError(JSCNError, ArithmeticError):
    """NaN or Inf showed up in a loss or gradient."""
