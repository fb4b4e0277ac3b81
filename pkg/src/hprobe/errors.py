"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class HprobeError(Exception):
    """Base class for all package errors."""


class DataError(HprobeError):
    """Invalid input data: dimension mismatches, non-finite values, parse failures."""


class NumericalError(HprobeError):
    """Numerical failure: singular systems, overflow, optimizer non-convergence."""


class SingularMatrixError(NumericalError):
    """A normal-equations matrix was singular outside the handled degenerate cases."""


class OverflowRowError(NumericalError):
    """exp() overflow in the variance-model density; carries the offending row."""

    def __init__(self, row: int, value: float):
        self.row = row
        self.value = value
        super().__init__(f"exp overflow in variance posterior at row {row} (linear predictor {value:.6g})")


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None, grad_norm: float | None = None):
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm
        super().__init__(message)
