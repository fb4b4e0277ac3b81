"""Point predictions and heteroscedastic prediction intervals.

A new observation's point prediction combines the non-sparse mean with
the calibrated aggregate sparse effect. Its predictive variance splits
into a parametric part (coefficient uncertainty propagated through the
sandwich covariance, plus the inclusion/slab uncertainty of the
aggregate) and the modeled observation noise exp(-v' omega). Intervals
use standard-normal critical values on the total.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DataError
from .model_core import FitResult

__all__ = [
    "PredictionInterval",
    "predict_point",
    "predictive_variance",
    "prediction_interval",
    "predict_intervals",
]


@dataclass(frozen=True)
class PredictionInterval:
    """One observation's prediction with its variance decomposition."""

    y_hat: float
    var_parametric: float
    sigma2_new: float
    lower: float
    upper: float
    level: float


def _rows(arr, p_expected: int, name: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(arr, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != p_expected:
        raise DataError(f"{name} must have {p_expected} columns, got shape {a.shape}")
    return a, single


def _resolve_v_var_new(fit: FitResult, v_new: np.ndarray, v_var_new) -> np.ndarray:
    k = fit.state.omega.shape[0]
    if v_var_new is None:
        if v_new.shape[1] == k:
            return v_new
        if k == 1:  # homoscedastic fit: intercept-only variance design
            return np.ones((v_new.shape[0], 1))
        raise DataError(
            f"variance design for prediction has {v_new.shape[1]} columns, the fit used {k}; "
            "pass v_var_new explicitly"
        )
    vv, _ = _rows(v_var_new, k, "v_var_new")
    return vv


def predict_point(fit: FitResult, x_new, v_new):
    """Point prediction v' phi + alpha0 * x'(p o beta).

    Accepts a single row (1-D) or a batch (2-D); returns float or array
    to match.
    """
    st = fit.state
    x, single = _rows(x_new, st.beta.shape[0], "x_new")
    v, _ = _rows(v_new, st.phi.shape[0], "v_new")
    if x.shape[0] != v.shape[0]:
        raise DataError("x_new and v_new row counts disagree")
    y_hat = v @ st.phi + st.alpha0 * (x @ (st.p_incl * st.beta))
    return float(y_hat[0]) if single else y_hat


def predictive_variance(fit: FitResult, x_new, v_new, v_var_new=None):
    """Parametric predictive variance and the new observation's noise.

    var_parametric = z' Psi z + V_agg (Var(alpha0) + alpha0^2), where z
    stacks the mean design row with the aggregate effect and V_agg =
    x^2 (p S^2 + beta^2 p (1-p)); sigma2_new = exp(-v_var' omega).
    """
    st = fit.state
    x, single = _rows(x_new, st.beta.shape[0], "x_new")
    v, _ = _rows(v_new, st.phi.shape[0], "v_new")
    if x.shape[0] != v.shape[0]:
        raise DataError("x_new and v_new row counts disagree")
    vv = _resolve_v_var_new(fit, v, v_var_new)

    w0_new = x @ (st.p_incl * st.beta)
    z = np.column_stack([v, w0_new])
    var_zpz = np.einsum("ij,jk,ik->i", z, fit.psi, z)
    agg_var = (x * x) @ (st.p_incl * st.s2 + st.beta * st.beta * st.p_incl * (1.0 - st.p_incl))
    var_alpha = float(fit.psi[-1, -1])
    var_parametric = var_zpz + agg_var * (var_alpha + st.alpha0 * st.alpha0)
    var_parametric = np.clip(var_parametric, 0.0, None)

    with np.errstate(over="ignore", under="ignore"):
        sigma2_new = np.exp(-(vv @ st.omega))
    if single:
        return float(var_parametric[0]), float(sigma2_new[0])
    return var_parametric, sigma2_new


def prediction_interval(fit: FitResult, x_new, v_new, level: float, v_var_new=None) -> PredictionInterval:
    """Gaussian interval y_hat +- z sqrt(var_parametric + sigma2_new) for one row."""
    if not (0.0 < level < 1.0):
        raise DataError(f"level must be in (0, 1), got {level}")
    x = np.asarray(x_new, dtype=float)
    if x.ndim != 1:
        raise DataError("prediction_interval takes a single observation; use predict_intervals for batches")
    y_hat = predict_point(fit, x_new, v_new)
    var_parametric, sigma2_new = predictive_variance(fit, x_new, v_new, v_var_new)
    zq = float(norm.ppf(0.5 * (1.0 + level)))
    half = zq * float(np.sqrt(var_parametric + sigma2_new))
    return PredictionInterval(
        y_hat=y_hat,
        var_parametric=var_parametric,
        sigma2_new=sigma2_new,
        lower=y_hat - half,
        upper=y_hat + half,
        level=level,
    )


def predict_intervals(fit: FitResult, x_new, v_new, level: float, v_var_new=None):
    """Batch intervals: returns (y_hat, lower, upper, var_parametric,
    sigma2_new) as arrays over rows."""
    if not (0.0 < level < 1.0):
        raise DataError(f"level must be in (0, 1), got {level}")
    x = np.atleast_2d(np.asarray(x_new, dtype=float))
    v = np.atleast_2d(np.asarray(v_new, dtype=float))
    y_hat = predict_point(fit, x, v)
    var_parametric, sigma2_new = predictive_variance(fit, x, v, v_var_new)
    zq = float(norm.ppf(0.5 * (1.0 + level)))
    half = zq * np.sqrt(var_parametric + sigma2_new)
    return y_hat, y_hat - half, y_hat + half, var_parametric, sigma2_new
