"""Heteroscedasticity model checks on fitted residuals."""

import numpy as np
from scipy.stats import f as f_dist

from .errors import DataError
from .model_core import DataSet, FitResult

__all__ = ["log_squared_residuals", "brown_forsythe", "quartile_groups"]

_EPS_FLOOR = 1e-12


def log_squared_residuals(fit: FitResult, data: DataSet) -> np.ndarray:
    """log(r_i^2 + 1e-12) for r_i = y_i - v_i' phi - alpha0 * w0_i."""
    st = fit.state
    r = data.y - data.v_mean @ st.phi - st.alpha0 * st.w0
    return np.log(r * r + _EPS_FLOOR)


def quartile_groups(values) -> np.ndarray:
    """Quartile-bin labels (0..3) for a continuous heterogeneity candidate."""
    values = np.asarray(values, dtype=float)
    qs = np.percentile(values, [25, 50, 75])
    return np.searchsorted(qs, values, side="left").astype(int)


def brown_forsythe(values, groups) -> tuple[float, float]:
    """One-way ANOVA F statistic on absolute deviations from group medians,
    with its p-value; tests whether spread varies across groups.

    Needs at least two groups with at least two members each.
    """
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    if values.shape != groups.shape:
        raise DataError("values and groups must have equal length")
    labels = np.unique(groups)
    if labels.size < 2:
        raise DataError("brown_forsythe needs at least two groups")
    devs = []
    for lab in labels:
        sub = values[groups == lab]
        if sub.size < 2:
            raise DataError(f"group {lab!r} has fewer than two members")
        devs.append(np.abs(sub - np.median(sub)))

    n_total = values.size
    k = labels.size
    grand = np.mean(np.concatenate(devs))
    ss_between = sum(d.size * (d.mean() - grand) ** 2 for d in devs)
    ss_within = sum(((d - d.mean()) ** 2).sum() for d in devs)
    df1, df2 = k - 1, n_total - k
    if ss_within <= 0.0:
        # no within-group spread: any between-group difference is infinitely
        # significant, none at all means no evidence
        return (np.inf, 0.0) if ss_between > 0 else (0.0, 1.0)
    stat = (ss_between / df1) / (ss_within / df2)
    return float(stat), float(f_dist.sf(stat, df1, df2))
