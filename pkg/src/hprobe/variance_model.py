"""Log-linear variance model.

The variance-model coefficients omega enter through sigma2_i =
exp(-v_i' omega). Conditional on the mean parameters, omega has a
multivariate log-gamma posterior with log density (up to a constant)

    log f(omega) = c' H omega - kappa' exp(H omega),

where H stacks the variance design on top of scaled identity prior rows,
c = (1/2 1_n, c 1_v), and kappa carries half the expected squared
residuals in its data rows. The density is concave, so the MAP is found
by a dense BFGS ascent with backtracking line search and the analytic
gradient H'(c - kappa o exp(H omega)).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError, OverflowRowError
from .model_core import PriorConfig

__all__ = [
    "MlgPosterior",
    "build_posterior",
    "mlg_log_density",
    "mlg_gradient",
    "omega_map",
    "sigma2_from_omega",
]

# exp() beyond this is treated as overflow; the optimizer clips at the same
# point so the line search never sees an infinity.
_EXP_CAP = 700.0
_SIGMA2_LO = 1e-300
_SIGMA2_HI = 1e300


@dataclass(frozen=True)
class MlgPosterior:
    """Stacked design, shape vector and rate vector of the omega posterior.

    h     : (n + v_sigma, v_sigma) design, data rows then prior rows
    c_vec : (n + v_sigma,) shape entries, 1/2 on data rows
    kappa : (n + v_sigma,) rate entries, >= 0
    """

    h: np.ndarray
    c_vec: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        rows, dim = self.h.shape
        if self.c_vec.shape != (rows,) or self.kappa.shape != (rows,):
            raise DataError("MlgPosterior: h, c_vec, kappa row counts disagree")
        if rows <= dim:
            raise DataError("MlgPosterior: need at least one data row")
        if np.any(self.kappa < 0):
            raise DataError("MlgPosterior: kappa must be non-negative")

    @property
    def dim(self) -> int:
        return self.h.shape[1]

    @property
    def n_data(self) -> int:
        return self.h.shape[0] - self.h.shape[1]


def build_posterior(v_var: np.ndarray, expected_sq_resid: np.ndarray, prior: PriorConfig) -> MlgPosterior:
    """Assemble the omega posterior from the variance design and the
    expected squared residuals.

    With sigma_omega_inv = 0 the prior is flat: its rows stay in the stack
    for fixed dimensions but carry zero kappa, so they contribute exactly
    zero to the density and gradient.
    """
    v_var = np.asarray(v_var, dtype=float)
    r2 = np.asarray(expected_sq_resid, dtype=float).reshape(-1)
    if v_var.shape[0] != r2.shape[0]:
        raise DataError("v_var and expected_sq_resid row counts disagree")
    if np.any(r2 < 0):
        raise DataError("expected squared residuals must be non-negative")
    n, v_sigma = v_var.shape
    prior_rows = (prior.sigma_omega_inv / np.sqrt(prior.c)) * np.eye(v_sigma)
    h = np.vstack([v_var, prior_rows])
    c_vec = np.concatenate([np.full(n, 0.5), np.full(v_sigma, prior.c)])
    kappa_prior = prior.c if prior.sigma_omega_inv > 0 else 0.0
    kappa = np.concatenate([0.5 * r2, np.full(v_sigma, kappa_prior)])
    return MlgPosterior(h=h, c_vec=c_vec, kappa=kappa)


def _linpred(omega: np.ndarray, post: MlgPosterior) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.shape[0] != post.dim:
        raise DataError(f"omega has length {omega.shape[0]}, expected {post.dim}")
    return post.h @ omega


def mlg_log_density(omega: np.ndarray, post: MlgPosterior) -> float:
    """Log unnormalized posterior density of omega; raises on exp overflow."""
    eta = _linpred(omega, post)
    hot = eta > _EXP_CAP
    if hot.any():
        row = int(np.argmax(eta))
        raise OverflowRowError(row, float(eta[row]))
    return float(post.c_vec @ eta - post.kappa @ np.exp(eta))


def mlg_gradient(omega: np.ndarray, post: MlgPosterior) -> np.ndarray:
    """Analytic gradient H'(c - kappa o exp(H omega)); same overflow contract."""
    eta = _linpred(omega, post)
    hot = eta > _EXP_CAP
    if hot.any():
        row = int(np.argmax(eta))
        raise OverflowRowError(row, float(eta[row]))
    return post.h.T @ (post.c_vec - post.kappa * np.exp(eta))


def _capped_value_grad(omega: np.ndarray, post: MlgPosterior) -> tuple[float, np.ndarray, bool]:
    """Value and gradient with exp capped at 700 for line-search safety.

    Returns (value, gradient, hot?) where hot marks positive overflow;
    negative arguments underflow to zero harmlessly.
    """
    eta = post.h @ omega
    hot = bool(np.any(eta > _EXP_CAP))
    with np.errstate(under="ignore"):
        ee = np.exp(np.minimum(eta, _EXP_CAP))
    value = float(post.c_vec @ eta - post.kappa @ ee)
    grad = post.h.T @ (post.c_vec - post.kappa * ee)
    return value, grad, hot


def omega_map(init: np.ndarray, post: MlgPosterior, tol: float = 1e-6, max_iter: int = 200) -> np.ndarray:
    """MAP of omega by BFGS ascent with backtracking line search.

    Returns omega with sup-norm gradient <= tol. Deterministic given
    inputs. Raises ConvergenceError when the iteration cap is exceeded.
    """
    x = np.asarray(init, dtype=float).reshape(-1).copy()
    if x.shape[0] != post.dim:
        raise DataError(f"init has length {x.shape[0]}, expected {post.dim}")
    f = mlg_log_density(x, post)  # strict: rejects an overflowing init
    g = mlg_gradient(x, post)

    dim = x.shape[0]
    h_inv = np.eye(dim)
    first = True
    for _ in range(max_iter):
        gnorm = np.max(np.abs(g))
        if gnorm <= tol:
            return x
        d = h_inv @ g  # ascent direction
        slope = float(g @ d)
        if slope <= 0:  # not an ascent direction: reset curvature
            h_inv = np.eye(dim)
            first = True
            d = g.copy()
            slope = float(g @ g)
        step = 1.0
        while True:
            f_new, g_new, hot = _capped_value_grad(x + step * d, post)
            if not hot and np.isfinite(f_new) and f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                raise ConvergenceError(
                    "line search failed in omega_map",
                    last_iterate=x,
                    grad_norm=float(gnorm),
                )
        s = step * d
        yv = g - g_new  # gradient change of the negated objective
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                h_inv *= sy / float(yv @ yv)
                first = False
            rho = 1.0 / sy
            v = np.eye(dim) - rho * np.outer(s, yv)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        x = x + s
        f, g = f_new, g_new

    raise ConvergenceError(
        f"omega_map did not converge in {max_iter} iterations "
        f"(gradient sup-norm {np.max(np.abs(g)):.3e})",
        last_iterate=x,
        grad_norm=float(np.max(np.abs(g))),
    )


def sigma2_from_omega(omega: np.ndarray, v_var: np.ndarray) -> np.ndarray:
    """Per-observation variances exp(-V omega), clamped to avoid under/overflow."""
    eta = -(np.asarray(v_var, dtype=float) @ np.asarray(omega, dtype=float).reshape(-1))
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(eta)
    lo, hi = out < _SIGMA2_LO, out > _SIGMA2_HI
    if lo.any() or hi.any():
        warnings.warn("sigma2_from_omega: values clamped to [1e-300, 1e300]", RuntimeWarning)
        out = np.clip(out, _SIGMA2_LO, _SIGMA2_HI)
    return out
