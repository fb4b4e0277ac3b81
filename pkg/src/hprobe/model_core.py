"""Domain types shared by all modules, plus input validation and screening."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "DataSet",
    "PriorConfig",
    "FitConfig",
    "FitState",
    "FitResult",
    "validate_dataset",
    "marginal_screen",
]


@dataclass(frozen=True)
class DataSet:
    """Validated regression inputs.

    y       : (n,) outcome
    x       : (n, p) sparse-candidate predictors
    v_mean  : (n, v) non-sparse mean predictors, first column all ones
    v_var   : (n, v_sigma) variance-model design, first column all ones

    The intercept_added_* flags record whether validate_dataset had to
    prepend a ones column; they are metadata, not part of the data.
    """

    y: np.ndarray
    x: np.ndarray
    v_mean: np.ndarray
    v_var: np.ndarray
    intercept_added_mean: bool = False
    intercept_added_var: bool = False

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class PriorConfig:
    """Weakly informative prior on the variance-model coefficients.

    c is the shape/rate constant of the log-gamma prior; sigma_omega_inv
    is the inverse prior scale (0 gives a flat prior, the default).
    """

    c: float = 1000.0
    sigma_omega_inv: float = 0.0

    def __post_init__(self):
        if not (self.c > 0):
            raise DataError(f"c must be positive, got {self.c}")
        if not (self.sigma_omega_inv >= 0):
            raise DataError(f"sigma_omega_inv must be non-negative, got {self.sigma_omega_inv}")


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the ECM fit.

    pi0_floor defaults to 1/p at fit time when left as None.
    homoscedastic=True forces an intercept-only variance design, which is
    the homoscedastic (PROBE) baseline.
    """

    max_iterations: int = 1000
    convergence_alpha: float = 0.1
    eb_lambda: float = 0.1
    pi0_floor: float | None = None
    homoscedastic: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DataError("max_iterations must be >= 1")
        if not (0.0 < self.convergence_alpha < 1.0):
            raise DataError("convergence_alpha must be in (0, 1)")
        if not (0.0 < self.eb_lambda < 1.0):
            raise DataError("eb_lambda must be in (0, 1)")
        if self.pi0_floor is not None and not (0.0 < self.pi0_floor <= 1.0):
            raise DataError("pi0_floor must be in (0, 1]")
        if self.seed < 0:
            raise DataError("seed must be a non-negative integer")


@dataclass
class FitState:
    """Per-iteration quantities of the ECM loop.

    beta    : (p,) slab coefficients, conditional on inclusion
    s2      : (p,) posterior variances of beta given inclusion
    p_incl  : (p,) posterior inclusion probabilities
    phi     : (v,) non-sparse mean coefficients
    alpha0  : overall expansion coefficient
    omega   : (v_sigma,) variance-model coefficients
    w0      : (n,) E[X (gamma o beta)]
    w0_var  : (n,) Var[X (gamma o beta)]
    t       : iteration counter
    """

    beta: np.ndarray
    s2: np.ndarray
    p_incl: np.ndarray
    phi: np.ndarray
    alpha0: float
    omega: np.ndarray
    w0: np.ndarray
    w0_var: np.ndarray
    t: int


@dataclass
class FitResult:
    """Converged MAP estimates plus the posterior covariance and trace.

    psi is the (v+1)x(v+1) posterior covariance of (phi, alpha0); sigma2
    holds the fitted per-observation variances exp(-V_var omega).
    """

    state: FitState
    psi: np.ndarray
    sigma2: np.ndarray
    converged: bool
    trace: list[tuple[int, float]]
    null_model: bool = False
    prob_clamp_count: int = 0
    intercept_flags: tuple[bool, bool] = (False, False)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError(f"{name} must be a vector or matrix, got ndim={arr.ndim}")
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise DataError(f"non-finite value at ({i},{k}) in {name}")


def _ensure_intercept(v: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if np.all(v[:, 0] == 1.0):
        return v, False
    if np.any(np.all(v == 1.0, axis=0)):
        raise DataError(f"{name} has a ones column that is not first; reorder columns")
    return np.column_stack([np.ones(v.shape[0]), v]), True


def validate_dataset(y, x, v_mean, v_var=None) -> DataSet:
    """Validate raw arrays and return an immutable DataSet.

    Prepends an intercept column to v_mean / v_var when absent and flags
    the injection. v_var defaults to v_mean when omitted.
    """
    y_arr = np.asarray(y, dtype=float).reshape(-1)
    x_arr = _as_matrix(x, "x")
    vm = _as_matrix(v_mean, "v_mean")
    vv = vm if v_var is None else _as_matrix(v_var, "v_var")

    n = y_arr.shape[0]
    if n < 2:
        raise DataError(f"n < 2 (got n={n})")
    for name, arr in (("x", x_arr), ("v_mean", vm), ("v_var", vv)):
        if arr.shape[0] != n:
            raise DataError(f"row count mismatch: {name} has {arr.shape[0]} rows, y has {n}")
        if arr.shape[1] < 1:
            raise DataError(f"{name} must have at least one column")
    _check_finite(y_arr[:, None], "y")
    _check_finite(x_arr, "x")
    _check_finite(vm, "v_mean")
    _check_finite(vv, "v_var")

    vm, added_mean = _ensure_intercept(vm, "v_mean")
    vv, added_var = _ensure_intercept(vv, "v_var")

    return DataSet(
        y=y_arr,
        x=x_arr,
        v_mean=vm,
        v_var=vv,
        intercept_added_mean=added_mean,
        intercept_added_var=added_var,
    )


def marginal_screen(data: DataSet, m: int) -> np.ndarray:
    """Indices of the m columns of X most correlated (in absolute value) with y.

    Ties break toward the lower column index; zero-variance columns rank
    last. When m >= p no screening happens and all indices come back in
    their original order.
    """
    if m < 1:
        raise DataError(f"m must be >= 1, got {m}")
    p = data.p
    if m >= p:
        return np.arange(p)

    yc = data.y - data.y.mean()
    xc = data.x - data.x.mean(axis=0)
    sx = np.sqrt((xc * xc).sum(axis=0))
    sy = np.sqrt((yc * yc).sum())
    denom = sx * sy
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.abs(xc.T @ yc) / denom
    # zero-variance columns (or constant y) get below any valid |corr|
    score[~np.isfinite(score)] = -1.0
    order = np.argsort(-score, kind="stable")
    return order[:m]
