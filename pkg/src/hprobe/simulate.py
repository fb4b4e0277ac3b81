"""Synthetic-data generator and experiment orchestration.

Predictors live on a square grid and are drawn from a Gaussian random
field with a squared-exponential covariance plus a shared per-observation
random intercept; binary predictors threshold the field at zero. The
nonzero-coefficient pattern is the top slice of an independent field draw
(spatially clustered, with an exact count), noise variances follow the
log-linear model with a common coefficient calibrated to a target
signal-to-noise ratio, and each replicate fits the requested methods and
scores them on a fresh test draw.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .ecm import fit
from .errors import DataError, HprobeError, NumericalError
from .model_core import DataSet, FitConfig, PriorConfig, validate_dataset
from .prediction import predict_intervals

__all__ = [
    "SimConfig",
    "SimTruth",
    "MetricsRow",
    "ExperimentResult",
    "grid_covariance",
    "generate_predictors",
    "generate_truth",
    "generate_v",
    "calibrate_omega_bar",
    "generate_outcome",
    "compute_metrics",
    "run_experiment",
]

METHODS = ("hprobe", "probe")


@dataclass(frozen=True)
class SimConfig:
    """Generator parameters for one simulation setting."""

    n: int
    p: int
    v: int
    seed: int
    pi_true: float
    eta_beta: float
    snr: float
    predictor_kind: str = "binary"
    length_scale: float = 20.0
    replicate_count: int = 1

    def __post_init__(self):
        sq = int(round(np.sqrt(self.p)))
        if sq * sq != self.p:
            raise DataError(f"p must be a perfect square, got {self.p}")
        if self.n < 2 or self.v < 1 or self.replicate_count < 1:
            raise DataError("n >= 2, v >= 1, replicate_count >= 1 required")
        if (self.v - 1) % 2 != 0:
            raise DataError("v must be odd: intercept plus equally many normal and Bernoulli columns")
        if not (0.0 < self.pi_true < 1.0):
            raise DataError("pi_true must be in (0, 1)")
        if self.eta_beta <= 0 or self.snr <= 0 or self.length_scale <= 0:
            raise DataError("eta_beta, snr, length_scale must be positive")
        if self.predictor_kind not in ("continuous", "binary"):
            raise DataError(f"predictor_kind must be 'continuous' or 'binary', got {self.predictor_kind!r}")

    @property
    def sqrt_p(self) -> int:
        return int(round(np.sqrt(self.p)))


@dataclass(frozen=True)
class SimTruth:
    """Generating parameters of one replicate."""

    gamma: np.ndarray
    beta: np.ndarray
    omega_bar: float


@dataclass
class MetricsRow:
    """One (replicate, method) row of an experiment table."""

    method: str
    replicate: int
    seed: int
    rmse: float = np.nan
    mad: float = np.nan
    tpr: float = np.nan
    fdr: float = np.nan
    ecp: float = np.nan
    mean_pi_length: float = np.nan
    runtime_seconds: float = np.nan
    error: str = ""


@dataclass
class ExperimentResult:
    """Per-replicate metric rows for each method."""

    config: SimConfig
    rows: list = field(default_factory=list)

    def by_method(self, method: str) -> list:
        return [r for r in self.rows if r.method == method and not r.error]


def grid_covariance(sqrt_p: int, length_scale: float = 20.0) -> np.ndarray:
    """Squared-exponential covariance over a sqrt_p x sqrt_p integer grid:
    element (k, k') = exp(-||(d_k - d_k')/length_scale||^2)."""
    if sqrt_p < 1:
        raise DataError("sqrt_p must be >= 1")
    idx = np.arange(sqrt_p * sqrt_p)
    coords = np.stack(np.divmod(idx, sqrt_p), axis=1).astype(float)
    diff = (coords[:, None, :] - coords[None, :, :]) / length_scale
    return np.exp(-(diff * diff).sum(axis=-1))


_factor_cache: dict = {}


def _grid_factor(sqrt_p: int, length_scale: float) -> np.ndarray:
    """Symmetric square root of the grid covariance, cached per setting.

    eigh can reject a matrix with non-finite entries only; on failure a
    1e-10 diagonal jitter is tried once.
    """
    key = (sqrt_p, float(length_scale))
    if key in _factor_cache:
        return _factor_cache[key]
    cov = grid_covariance(sqrt_p, length_scale)
    try:
        vals, vecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError:
        try:
            vals, vecs = np.linalg.eigh(cov + 1e-10 * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("grid covariance factorization failed even with jitter") from exc
    factor = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    _factor_cache[key] = factor
    return factor


def _draw_predictor_field(config: SimConfig, rng: np.random.Generator):
    """Latent continuous field (n x p) and the shared row effects a_i."""
    factor = _grid_factor(config.sqrt_p, config.length_scale)
    a = rng.normal(0.0, np.sqrt(0.75), size=config.n)
    z = rng.standard_normal((config.n, config.p)) @ factor + a[:, None]
    return z, a


def generate_predictors(config: SimConfig, rng=None) -> np.ndarray:
    """Draw the n x p predictor matrix; binary kind thresholds the field at zero."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    z, _ = _draw_predictor_field(config, rng)
    if config.predictor_kind == "binary":
        return (z < 0.0).astype(float)
    return z


def generate_truth(config: SimConfig, rng=None):
    """Spatially clustered inclusion pattern with an exact count, plus
    uniform slab coefficients.

    gamma marks the round(p * pi_true) largest values of an independent
    field draw (ties broken by lower index); beta ~ U(0, 2 eta_beta).
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    m = int(round(config.p * config.pi_true))
    if m < 1:
        raise DataError("p * pi_true must round to at least 1 signal")
    factor = _grid_factor(config.sqrt_p, config.length_scale)
    g = factor @ rng.standard_normal(config.p)
    top = np.argsort(-g, kind="stable")[:m]
    gamma = np.zeros(config.p)
    gamma[top] = 1.0
    beta = rng.uniform(0.0, 2.0 * config.eta_beta, size=config.p)
    return gamma, beta


def generate_v(config: SimConfig, rng=None) -> np.ndarray:
    """Non-sparse design: intercept, then (v-1)/2 standard normal and
    (v-1)/2 Bernoulli(0.5) columns."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    half = (config.v - 1) // 2
    cols = [np.ones(config.n)]
    if half:
        cols.append(rng.standard_normal((config.n, half)))
        cols.append(rng.binomial(1, 0.5, size=(config.n, half)).astype(float))
    return np.column_stack(cols)


def calibrate_omega_bar(x, gamma, beta, v_var, target_snr: float) -> float:
    """Common variance-model coefficient hitting a target signal-to-noise
    ratio.

    Solves  s2_W / mean_i exp(-wbar * S_i) = target_snr  for wbar, where
    s2_W is the sample variance of the aggregate signal x (gamma o beta)
    and S_i sums row i of the variance design. The left side is the
    plug-in signal-to-noise ratio: signal variance over the average noise
    variance. Monotone bracketing expands geometrically from zero; a
    mixed-sign design can make the equation unsolvable for strong
    targets, which raises.
    """
    x = np.asarray(x, dtype=float)
    w = x @ (np.asarray(gamma, dtype=float) * np.asarray(beta, dtype=float))
    s2w = float(np.var(w, ddof=1))
    if not (s2w > 0):
        raise DataError("aggregate signal has zero variance; cannot calibrate")
    if target_snr <= 0:
        raise DataError("target_snr must be positive")
    s = np.asarray(v_var, dtype=float).sum(axis=1)
    target = s2w / target_snr  # required mean noise variance

    def mean_sigma2(wbar: float) -> float:
        with np.errstate(under="ignore"):
            return float(np.mean(np.exp(np.minimum(-wbar * s, 700.0))))

    f0 = mean_sigma2(0.0)
    if target == f0:
        return 0.0
    # expand geometrically away from zero in the direction that moves the
    # mean noise variance toward the target; value sequences that turn
    # around before crossing mean the equation has no root on this branch
    direction = -1.0 if target > f0 else 1.0
    prev_cand, prev_val = 0.0, f0
    step = 1.0
    bracket = None
    for _ in range(200):
        cand = direction * step
        val = mean_sigma2(cand)
        if direction < 0.0:
            if val >= target:
                bracket = (cand, prev_cand)
                break
            if val < prev_val:
                raise NumericalError("non-monotone bracket in calibrate_omega_bar (mixed-sign design)")
        else:
            if val <= target:
                bracket = (prev_cand, cand)
                break
            if val > prev_val:
                raise NumericalError("non-monotone bracket in calibrate_omega_bar (mixed-sign design)")
        prev_cand, prev_val = cand, val
        step *= 2.0
    if bracket is None:
        raise NumericalError("bracket expansion failed in calibrate_omega_bar")

    root = brentq(lambda wb: mean_sigma2(wb) - target, bracket[0], bracket[1], xtol=1e-13, rtol=1e-14)
    return float(root)


def generate_outcome(x, gamma, beta, v_var, omega_bar: float, seed) -> np.ndarray:
    """y_i = x_i'(gamma o beta) + eps_i with eps_i ~ N(0, exp(-v_i' omega)),
    every variance-model coefficient equal to omega_bar."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    v_var = np.asarray(v_var, dtype=float)
    signal = x @ (np.asarray(gamma, dtype=float) * np.asarray(beta, dtype=float))
    with np.errstate(over="ignore", under="ignore"):
        sigma2 = np.exp(-omega_bar * v_var.sum(axis=1))
    return signal + rng.standard_normal(x.shape[0]) * np.sqrt(sigma2)


def compute_metrics(fit_result, truth: SimTruth, test_data: DataSet, level: float = 0.95) -> MetricsRow:
    """Score a fit on held-out data: RMSE/MAD of the aggregate sparse
    effect, TPR/FDR of the p > 0.5 selection rule, and coverage/length of
    the prediction intervals."""
    st = fit_result.state
    x_test = test_data.x
    true_signal = x_test @ (truth.gamma * truth.beta)
    est_signal = st.alpha0 * (x_test @ (st.p_incl * st.beta))
    err = est_signal - true_signal

    gamma_hat = st.p_incl > 0.5
    n_true = truth.gamma.sum()
    tpr = float(gamma_hat[truth.gamma == 1].sum() / n_true) if n_true > 0 else np.nan
    n_sel = int(gamma_hat.sum())
    fdr = float(gamma_hat[truth.gamma == 0].sum() / n_sel) if n_sel > 0 else 0.0

    _, lower, upper, _, _ = predict_intervals(
        fit_result, x_test, test_data.v_mean, level, v_var_new=test_data.v_var
    )
    covered = (test_data.y >= lower) & (test_data.y <= upper)

    return MetricsRow(
        method="",
        replicate=-1,
        seed=-1,
        rmse=float(np.sqrt(np.mean(err * err))),
        mad=float(np.median(np.abs(err))),
        tpr=tpr,
        fdr=fdr,
        ecp=float(np.mean(covered)),
        mean_pi_length=float(np.mean(upper - lower)),
    )


def _replicate_seed(master_seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([master_seed, replicate]).generate_state(1, np.uint64)[0])


def _run_replicate(config: SimConfig, replicate: int, methods, level: float) -> list:
    rng = np.random.default_rng([config.seed, replicate])
    rep_seed = _replicate_seed(config.seed, replicate)

    x_train = generate_predictors(config, rng)
    gamma, beta = generate_truth(config, rng)
    v_train = generate_v(config, rng)
    omega_bar = calibrate_omega_bar(x_train, gamma, beta, v_train, config.snr)
    y_train = generate_outcome(x_train, gamma, beta, v_train, omega_bar, rng)
    x_test = generate_predictors(config, rng)
    v_test = generate_v(config, rng)
    y_test = generate_outcome(x_test, gamma, beta, v_test, omega_bar, rng)

    train = validate_dataset(y_train, x_train, v_train)
    test = validate_dataset(y_test, x_test, v_test)
    truth = SimTruth(gamma=gamma, beta=beta, omega_bar=omega_bar)

    rows = []
    for method in methods:
        if method not in METHODS:
            raise DataError(f"unknown method {method!r}; expected one of {METHODS}")
        fc = FitConfig(homoscedastic=(method == "probe"), seed=rep_seed)
        row = MetricsRow(method=method, replicate=replicate, seed=rep_seed)
        t0 = time.perf_counter()
        try:
            result = fit(train, fc, PriorConfig())
            scored = compute_metrics(result, truth, test, level)
            row.rmse, row.mad = scored.rmse, scored.mad
            row.tpr, row.fdr = scored.tpr, scored.fdr
            row.ecp, row.mean_pi_length = scored.ecp, scored.mean_pi_length
        except HprobeError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        row.runtime_seconds = time.perf_counter() - t0
        rows.append(row)
    return rows


def run_experiment(config: SimConfig, methods=METHODS, level: float = 0.95, n_jobs: int = 1) -> ExperimentResult:
    """Generate, fit, and score every replicate.

    Replicates derive independent random streams from (seed, replicate),
    so results do not depend on scheduling; per-replicate fit errors are
    recorded in the row rather than raised.
    """
    result = ExperimentResult(config=config)
    if n_jobs <= 1:
        for r in range(config.replicate_count):
            result.rows.extend(_run_replicate(config, r, methods, level))
        return result
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        futures = [
            pool.submit(_run_replicate, config, r, methods, level)
            for r in range(config.replicate_count)
        ]
        for fut in futures:
            result.rows.extend(fut.result())
    return result
