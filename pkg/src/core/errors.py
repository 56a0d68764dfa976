"""
Errors

Exception hierarchy for the network effects toolkit. The CLI maps
configuration and parse errors to exit code 2 and everything else to 1.
"""

from typing import Any, List, Optional


class NetfxError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(NetfxError):
    """Invalid configuration, estimand definition or environment setting."""


class CapacityError(ConfigurationError):
    """A cluster is larger than the treatment enumeration cap."""

    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(
            f"cluster size {size} exceeds the enumeration cap of {cap} "
            f"(2^{size} assignments); raise NETFX_ENUM_CAP to allow it"
        )


class DomainError(NetfxError, ValueError):
    """Argument outside its mathematical domain."""


class DataParseError(NetfxError):
    """
    Raised when an input CSV cannot be turned into a valid dataset.

    Attributes:
        row: 1-based line number in the CSV (header is line 1), if known
        column: offending column name, if known
    """

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(prefix + message)


class DesignError(NetfxError):
    """Design matrix is rank deficient."""

    def __init__(self, message: str, columns: Optional[List[str]] = None):
        self.columns = columns or []
        if self.columns:
            message = f"{message}; collinear columns: {', '.join(self.columns)}"
        super().__init__(message)


class ConvergenceError(NetfxError):
    """
    Optimizer did not reach the gradient tolerance.

    Attributes:
        last_iterate: parameter vector at the last iteration
        grad_norm: infinity norm of the gradient there
    """

    def __init__(self, message: str, last_iterate: Any = None, grad_norm: Optional[float] = None):
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm
        if grad_norm is not None:
            message = f"{message} (gradient norm {grad_norm:.3e})"
        super().__init__(message)


class SeparationError(ConvergenceError):
    """Logistic coefficients diverge, usually because of perfect separation."""


class EstimationError(NetfxError):
    """Estimation preconditions are violated."""


class VarianceUnavailableError(EstimationError):
    """A confidence interval was requested but no variance is available."""


class NuisanceFitError(NetfxError):
    """A nuisance model failed to fit on one cross-fitting fold."""

    def __init__(self, fold: int, model: str, cause: Exception):
        self.fold = fold
        self.model = model
        self.cause = cause
        super().__init__(f"{model} fit failed on the complement of fold {fold}: {cause}")
