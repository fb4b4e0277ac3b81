"""Partitioned expectation/conditional-maximization loop.

Each iteration runs, in order: the overall CM-step for (phi, alpha0)
using the previous iteration's variances, the variance-coefficient
CM-step (quasi-Newton MAP warm-started from the previous omega), the
coordinate CM-steps for every (beta_k, alpha_k) against leave-one-out
aggregates frozen at the previous E-step, then the E-step: learning-rate
damping of (beta, S^2), empirical-Bayes inclusion probabilities, and the
aggregate-effect moment update. Convergence is declared when the scaled
worst-case squared change in the aggregate effect drops below a chi^2_1
quantile.

The homoscedastic configuration (intercept-only variance design) is the
PROBE baseline; everything else is shared.
"""

import numpy as np
from scipy.stats import chi2

from .empirical_bayes import eb_state, inclusion_probs
from .errors import DataError, NumericalError, SingularMatrixError
from .model_core import DataSet, FitConfig, FitResult, FitState, PriorConfig
from .variance_model import build_posterior, omega_map, sigma2_from_omega

__all__ = [
    "MomentPair",
    "e_step_moments",
    "leave_one_out_moments",
    "cm_step_coordinate",
    "cm_step_overall",
    "apply_learning_rate",
    "convergence_check",
    "fit",
]

# below this, the W column is treated as identically zero and the
# expansion coefficient is fixed at its identity value 1
_DEGENERATE_W_TOL = 1e-12
_COND_LIMIT = 1e15


class MomentPair:
    """First moment and variance of an aggregate effect, per observation."""

    __slots__ = ("w", "w_var")

    def __init__(self, w: np.ndarray, w_var: np.ndarray):
        self.w = np.asarray(w, dtype=float)
        self.w_var = np.asarray(w_var, dtype=float)
        if self.w.shape != self.w_var.shape:
            raise DataError("MomentPair: w and w_var shapes disagree")
        if np.any(self.w_var < 0):
            raise DataError("MomentPair: w_var must be non-negative")


def e_step_moments(x: np.ndarray, beta: np.ndarray, p_incl: np.ndarray, x_sq=None) -> MomentPair:
    """Moments of the aggregate sparse effect under independent inclusion:

        E W_i   = X_i (beta o p)
        Var W_i = X_i^2 (beta^2 o p o (1-p))

    x_sq may pass a precomputed elementwise square of x.
    """
    beta = np.asarray(beta, dtype=float)
    p_incl = np.asarray(p_incl, dtype=float)
    if x_sq is None:
        x_sq = x * x
    w = x @ (beta * p_incl)
    w_var = x_sq @ (beta * beta * p_incl * (1.0 - p_incl))
    return MomentPair(w, np.clip(w_var, 0.0, None))


def leave_one_out_moments(
    w0: MomentPair,
    x_k: np.ndarray,
    beta_k: float,
    p_k: float,
    v_phi_fitted: np.ndarray,
    alpha0: float,
) -> MomentPair:
    """Moments of the aggregate excluding predictor k, plus the fitted
    non-sparse mean: subtract k's contribution from the overall moments.

    alpha0 is accepted with the rest of the iteration state; the
    expansion coefficient is re-estimated per coordinate, so it does not
    rescale the leave-one-out aggregate.
    """
    w = w0.w - x_k * (beta_k * p_k) + v_phi_fitted
    w_var = np.clip(w0.w_var - x_k * x_k * (beta_k * beta_k * p_k * (1.0 - p_k)), 0.0, None)
    return MomentPair(w, w_var)


def _solve2x2(a11, a12, a22, b1, b2):
    det = a11 * a22 - a12 * a12
    tr = a11 + a22
    if not np.isfinite(det) or det <= 0 or tr * tr / det > _COND_LIMIT:
        cond = np.inf if det <= 0 else tr * tr / det
        raise SingularMatrixError(f"singular 2x2 normal matrix (condition estimate {cond:.3e})")
    return (a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det, det


def cm_step_coordinate(x_k: np.ndarray, wk: MomentPair, sigma2_inv: np.ndarray, y: np.ndarray):
    """Weighted MAP of (beta_k, alpha_k) against the leave-one-out aggregate.

    The 2x2 normal matrix uses the second moment of W on its W-diagonal;
    the posterior-variance sandwich A^(-1) B A^(-1) keeps first moments in
    the middle factor. Returns (beta_hat, alpha_hat, s2_hat) where s2_hat
    is the beta-beta element of the sandwich.

    When the W column is numerically zero the problem degenerates to a
    univariate weighted fit and alpha_hat is reported at its
    parameter-expansion identity value 1.
    """
    si = np.asarray(sigma2_inv, dtype=float)
    x_k = np.asarray(x_k, dtype=float)
    y = np.asarray(y, dtype=float)
    ew2 = wk.w * wk.w + wk.w_var
    a11 = si @ (x_k * x_k)
    b1 = si @ (x_k * y)
    if float(np.max(ew2, initial=0.0)) < _DEGENERATE_W_TOL:
        if not np.isfinite(a11) or a11 <= 0:
            raise SingularMatrixError("zero predictor column in degenerate coordinate step")
        return b1 / a11, 1.0, 1.0 / a11
    a12 = si @ (x_k * wk.w)
    a22 = si @ ew2
    b2 = si @ (wk.w * y)
    beta_hat, alpha_hat, det = _solve2x2(a11, a12, a22, b1, b2)
    b22 = si @ (wk.w * wk.w)
    s2_hat = (a22 * a22 * a11 - 2.0 * a22 * a12 * a12 + a12 * a12 * b22) / (det * det)
    return beta_hat, alpha_hat, s2_hat


def cm_step_overall(v_mean: np.ndarray, w0: MomentPair, sigma2_inv: np.ndarray, y: np.ndarray):
    """Weighted MAP of (phi, alpha0) against the overall aggregate, plus the
    (v+1)x(v+1) sandwich covariance of the estimate.

    With a numerically zero aggregate the alpha0 column is dropped, phi
    solves the weighted least-squares problem on v_mean alone, alpha0 is
    1, and the alpha0 block of the covariance is zeroed.
    """
    si = np.asarray(sigma2_inv, dtype=float)
    v = v_mean.shape[1]
    vsi = v_mean * si[:, None]
    a_vv = v_mean.T @ vsi
    rhs_v = v_mean.T @ (si * y)
    ew2 = w0.w * w0.w + w0.w_var

    if float(np.max(ew2, initial=0.0)) < _DEGENERATE_W_TOL:
        a_inv = _inv_checked(a_vv, "degenerate overall step")
        phi = a_inv @ rhs_v
        psi = np.zeros((v + 1, v + 1))
        psi[:v, :v] = a_inv  # A = B when w_var = w = 0 on the phi block
        return phi, 1.0, psi

    a_vw = v_mean.T @ (si * w0.w)
    a_ww = si @ ew2
    b_ww = si @ (w0.w * w0.w)
    a = np.empty((v + 1, v + 1))
    a[:v, :v] = a_vv
    a[:v, v] = a_vw
    a[v, :v] = a_vw
    a[v, v] = a_ww
    b = a.copy()
    b[v, v] = b_ww
    rhs = np.concatenate([rhs_v, [si @ (w0.w * y)]])
    a_inv = _inv_checked(a, "overall CM step")
    coef = a_inv @ rhs
    psi = a_inv @ b @ a_inv
    return coef[:v], float(coef[v]), psi


def _inv_checked(a: np.ndarray, where: str) -> np.ndarray:
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMatrixError(f"singular normal matrix in {where} (condition estimate {cond:.3e})")
    return np.linalg.inv(a)


def apply_learning_rate(prev_beta, new_beta, prev_s2, new_s2, t: int):
    """Damped update with rate q = 1/(t+1): convex mix of beta, harmonic
    (precision-weighted) mix of S^2. An infinite prev_s2 encodes the
    uninformative start, giving S^2 = new_s2 / q at t = 1.
    """
    if t < 1:
        raise DataError("learning-rate mixing needs t >= 1")
    prev_s2 = np.asarray(prev_s2, dtype=float)
    new_s2 = np.asarray(new_s2, dtype=float)
    if np.any(prev_s2 <= 0) or np.any(new_s2 <= 0):
        raise DataError("s2 inputs to apply_learning_rate must be positive")
    q = 1.0 / (t + 1.0)
    beta = (1.0 - q) * np.asarray(prev_beta, dtype=float) + q * np.asarray(new_beta, dtype=float)
    s2 = 1.0 / ((1.0 - q) / prev_s2 + q / new_s2)
    return beta, s2


def convergence_check(w0_new, w0_old, w0_var_new, n: int, alpha: float):
    """Scaled worst-case squared change of the aggregate effect:

        CC = log(n) max_i (w_new_i - w_old_i)^2 / w_var_new_i

    Rows with zero variance are skipped unless their change is nonzero,
    which forces CC = inf. Done when CC < the alpha quantile of chi^2_1.
    """
    if n < 2:
        raise DataError("convergence check needs n >= 2")
    diff2 = (np.asarray(w0_new, dtype=float) - np.asarray(w0_old, dtype=float)) ** 2
    var = np.asarray(w0_var_new, dtype=float)
    zero_var = var <= 0.0
    if np.any(zero_var & (diff2 > 0.0)):
        cc = np.inf
    elif np.all(zero_var):
        cc = 0.0
    else:
        cc = float(np.log(n) * np.max(diff2[~zero_var] / var[~zero_var]))
    return cc, bool(cc < chi2.ppf(alpha, df=1))


def _coordinate_cm_all(x, x_sq, w0: MomentPair, beta, p_incl, v_phi_fitted, sigma2_inv, y):
    """All coordinate CM-steps at once against the frozen iteration state.

    Exactly the per-coordinate update: every k sees the same (beta, p)
    from the previous E-step, so the loop is embarrassingly parallel and
    is evaluated here in column blocks.
    """
    n, p = x.shape
    si = sigma2_inv
    u = w0.w + v_phi_fitted
    c = beta * p_incl
    d = beta * beta * p_incl * (1.0 - p_incl)
    siy = si * y

    beta_hat = np.empty(p)
    alpha_hat = np.empty(p)
    s2_hat = np.empty(p)
    block = max(1, int(2**21 // max(1, n)))
    for lo in range(0, p, block):
        hi = min(p, lo + block)
        xb = x[:, lo:hi]
        xb2 = x_sq[:, lo:hi]
        wb = u[:, None] - xb * c[lo:hi][None, :]
        wvb = np.clip(w0.w_var[:, None] - xb2 * d[lo:hi][None, :], 0.0, None)
        ew2 = wb * wb + wvb
        a11 = si @ xb2
        a12 = si @ (xb * wb)
        a22 = si @ ew2
        b22 = si @ (wb * wb)
        b1 = xb.T @ siy
        b2 = wb.T @ siy

        degen = ew2.max(axis=0) < _DEGENERATE_W_TOL
        det = a11 * a22 - a12 * a12
        tr = a11 + a22
        bad = ~degen & (~np.isfinite(det) | (det <= 0) | (tr * tr > _COND_LIMIT * det))
        if np.any(bad):
            j = int(np.argmax(bad))
            cond = np.inf if det[j] <= 0 else float(tr[j] ** 2 / det[j])
            raise SingularMatrixError(
                f"singular normal matrix at coordinate k={lo + j} (condition estimate {cond:.3e})"
            )
        bad_degen = degen & ((a11 <= 0) | ~np.isfinite(a11))
        if np.any(bad_degen):
            raise SingularMatrixError(f"zero predictor column at coordinate k={lo + int(np.argmax(bad_degen))}")

        det_safe = np.where(degen, 1.0, det)
        a11_safe = np.where(a11 > 0, a11, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            bh = np.where(degen, b1 / a11_safe, (a22 * b1 - a12 * b2) / det_safe)
            ah = np.where(degen, 1.0, (a11 * b2 - a12 * b1) / det_safe)
            s2 = np.where(
                degen,
                1.0 / a11_safe,
                (a22 * a22 * a11 - 2.0 * a22 * a12 * a12 + a12 * a12 * b22) / (det_safe * det_safe),
            )
        beta_hat[lo:hi] = bh
        alpha_hat[lo:hi] = ah
        s2_hat[lo:hi] = s2
    return beta_hat, alpha_hat, s2_hat


def fit(data: DataSet, fit_config: FitConfig | None = None, prior_config: PriorConfig | None = None) -> FitResult:
    """Run the full ECM loop on a validated DataSet.

    Terminates on convergence, on an all-zero inclusion vector (null
    model, surfaced via the null_model flag), or at max_iterations.
    Deterministic given inputs.
    """
    fit_config = fit_config or FitConfig()
    prior_config = prior_config or PriorConfig()
    y = data.y
    x = data.x
    v_mean = data.v_mean
    v_var = np.ones((data.n, 1)) if fit_config.homoscedastic else data.v_var
    n, p = x.shape
    if p < 2:
        raise DataError("fit needs at least two sparse-candidate predictors")
    pi0_floor = fit_config.pi0_floor if fit_config.pi0_floor is not None else 1.0 / p

    x_sq = x * x
    beta = np.zeros(p)
    s2 = np.full(p, np.inf)
    p_incl = np.zeros(p)
    w0 = MomentPair(np.zeros(n), np.zeros(n))
    omega = np.zeros(v_var.shape[1])
    s2_y = float(np.var(y, ddof=1))
    omega[0] = np.log(s2_y) if s2_y > 0 else 0.0
    sigma2 = sigma2_from_omega(omega, v_var)
    si = 1.0 / sigma2

    phi = np.zeros(v_mean.shape[1])
    alpha0 = 1.0
    psi = np.zeros((v_mean.shape[1] + 1, v_mean.shape[1] + 1))
    trace: list[tuple[int, float]] = []
    converged = False
    null_model = False
    clamp_total = 0
    t = 0

    for t in range(1, fit_config.max_iterations + 1):
        try:
            # CM-step, overall block: (phi, alpha0) under previous variances
            phi, alpha0, psi = cm_step_overall(v_mean, w0, si, y)

            # CM-step, variance block: expected squared residuals feed the
            # posterior; warm-started quasi-Newton MAP
            resid = y - v_mean @ phi - alpha0 * w0.w
            r2 = resid * resid + alpha0 * alpha0 * w0.w_var
            omega = omega_map(omega, build_posterior(v_var, r2, prior_config), tol=1e-6)
            sigma2 = sigma2_from_omega(omega, v_var)
            si = 1.0 / sigma2

            # CM-step, coordinates: frozen (beta, p), fresh phi and variances
            beta_hat, _, s2_hat = _coordinate_cm_all(
                x, x_sq, w0, beta, p_incl, v_mean @ phi, si, y
            )

            # E-step (a): damp
            beta, s2 = apply_learning_rate(beta, beta_hat, s2, s2_hat, t)
            # E-step (b): inclusion probabilities
            st = eb_state(beta, s2, fit_config.eb_lambda, pi0_floor)
            p_incl, n_clamped = inclusion_probs(
                st.t_stats, st.pi0_hat, st.kde, return_clamp_count=True
            )
            clamp_total += n_clamped
            # E-step (c): aggregate moments
            w_new = e_step_moments(x, beta, p_incl, x_sq=x_sq)
        except NumericalError as exc:
            raise NumericalError(f"fit iteration {t}: {exc}") from exc

        cc, done = convergence_check(w_new.w, w0.w, w_new.w_var, n, fit_config.convergence_alpha)
        trace.append((t, cc))
        w0 = w_new
        if float(np.max(p_incl)) == 0.0:
            null_model = True
            converged = True
            break
        if done:
            converged = True
            break

    state = FitState(
        beta=beta,
        s2=s2,
        p_incl=p_incl,
        phi=phi,
        alpha0=float(alpha0),
        omega=omega,
        w0=w0.w,
        w0_var=w0.w_var,
        t=t,
    )
    return FitResult(
        state=state,
        psi=psi,
        sigma2=sigma2,
        converged=converged,
        trace=trace,
        null_model=null_model,
        prob_clamp_count=clamp_total,
        intercept_flags=(data.intercept_added_mean, data.intercept_added_var),
    )
