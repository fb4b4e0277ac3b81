"""Plug-in empirical Bayes machinery of the E-step.

Coefficient test statistics T_k = beta_k / S_k follow a two-groups
mixture: standard normal under exclusion, unknown f1 under inclusion.
The inclusion probability comes out as p_k = 1 - pi0 f0(T_k) / fhat(T_k)
with fhat a Gaussian kernel density estimate over all observed statistics
and pi0 the Storey tail-count estimate of the null proportion.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DataError

__all__ = [
    "EbState",
    "GaussianKde",
    "test_statistics",
    "two_sided_pvalues",
    "storey_pi0",
    "gaussian_kde_fit",
    "inclusion_probs",
    "eb_state",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianKde:
    """Gaussian kernel density evaluator: fhat(x) = mean_k phi((x - t_k)/h) / h."""

    samples: np.ndarray
    h: float

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(x.shape[0])
        # chunked to bound memory when both x and samples are large
        block = max(1, int(2**21 // max(1, self.samples.size)))
        for lo in range(0, x.shape[0], block):
            z = (x[lo : lo + block, None] - self.samples[None, :]) / self.h
            with np.errstate(under="ignore"):
                out[lo : lo + block] = np.exp(-0.5 * z * z).mean(axis=1)
        return out / (self.h * _SQRT_2PI)


@dataclass(frozen=True)
class EbState:
    """One E-step's worth of empirical-Bayes quantities."""

    t_stats: np.ndarray
    pvalues: np.ndarray
    pi0_hat: float
    kde: GaussianKde


def test_statistics(beta: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """T_k = beta_k / sqrt(s2_k); every s2_k must be positive."""
    beta = np.asarray(beta, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    bad = np.flatnonzero(~(s2 > 0))
    if bad.size:
        raise DataError(f"s2 must be positive; offending index k={bad[0]} (value {s2[bad[0]]})")
    return beta / np.sqrt(s2)


def two_sided_pvalues(t_stats: np.ndarray) -> np.ndarray:
    """P_k = 2 (1 - Phi(|T_k|))."""
    return 2.0 * norm.sf(np.abs(np.asarray(t_stats, dtype=float)))


def storey_pi0(pvalues: np.ndarray, lam: float, pi0_floor: float) -> float:
    """Tail-count estimate of the null proportion, clamped to [pi0_floor, 1]."""
    pvalues = np.asarray(pvalues, dtype=float)
    if pvalues.size == 0:
        raise DataError("storey_pi0: empty p-value vector")
    if not (0.0 < lam < 1.0):
        raise DataError(f"lambda must be in (0, 1), got {lam}")
    raw = np.mean(pvalues >= lam) / (1.0 - lam)
    return float(min(1.0, max(pi0_floor, raw)))


def _silverman_bandwidth(t_stats: np.ndarray) -> float:
    sd = float(np.std(t_stats))
    q75, q25 = np.percentile(t_stats, [75, 25])
    iqr = float(q75 - q25)
    a = min(sd, iqr / 1.34)
    if a <= 0.0:
        a = max(sd, iqr / 1.34)  # one spread measure degenerate, use the other
    if a <= 0.0:
        return 0.0
    return 0.9 * a * t_stats.size ** (-0.2)


def gaussian_kde_fit(t_stats: np.ndarray) -> GaussianKde:
    """Gaussian KDE with the rule-of-thumb bandwidth
    0.9 min(sd, IQR/1.34) p^(-1/5); falls back to h = 1 with a warning
    when the statistics have no spread.
    """
    t_stats = np.asarray(t_stats, dtype=float).reshape(-1)
    if t_stats.size < 2:
        raise DataError("gaussian_kde_fit needs at least two statistics")
    h = _silverman_bandwidth(t_stats)
    if h <= 0.0:
        warnings.warn("KDE bandwidth degenerate (zero spread); falling back to h=1", RuntimeWarning)
        h = 1.0
    return GaussianKde(samples=t_stats.copy(), h=h)


def inclusion_probs(
    t_stats: np.ndarray,
    pi0_hat: float,
    kde: GaussianKde,
    return_clamp_count: bool = False,
):
    """p_k = 1 - pi0 f0(T_k) / fhat(T_k), clamped to [0, 1].

    f0 is the standard normal density. With return_clamp_count=True also
    returns how many raw values fell outside [0, 1] before clamping.
    """
    t_stats = np.asarray(t_stats, dtype=float)
    fhat = kde(t_stats)
    if np.any(fhat <= 0):
        raise DataError("KDE must be strictly positive at every statistic")
    raw = 1.0 - pi0_hat * norm.pdf(t_stats) / fhat
    clamped = np.clip(raw, 0.0, 1.0)
    if return_clamp_count:
        return clamped, int(np.sum((raw < 0.0) | (raw > 1.0)))
    return clamped


def eb_state(beta: np.ndarray, s2: np.ndarray, lam: float, pi0_floor: float) -> EbState:
    """Convenience builder: statistics, p-values, Storey pi0, and the KDE."""
    t = test_statistics(beta, s2)
    pvals = two_sided_pvalues(t)
    pi0 = storey_pi0(pvals, lam, pi0_floor)
    kde = gaussian_kde_fit(t)
    return EbState(t_stats=t, pvalues=pvals, pi0_hat=pi0, kde=kde)
