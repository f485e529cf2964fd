"""Kalman and ensemble Kalman filter updates.

The ensemble filters use perturbed observations: each member is updated
with its own noisy copy of the observation,

    x_j^a = x_j^f + K (y + eps_j - H x_j^f),   K = S H^T (H S H^T + R)^{-1},

where ``S`` is whatever forecast covariance the variant supplies (raw
sample covariance, a regularized estimate, or an inflated one).  Gains are
always formed through a single SPD solve on the ``q x q`` innovation
covariance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import covariance as cov
from .ensemble import Ensemble
from .errors import (
    DegenerateLikelihood,
    DimensionMismatch,
    InnovationCovarianceNotPD,
    ModelBlewUp,
    NonFiniteState,
    CflViolation,
    NotPositiveDefinite,
)
from .models.base import ModelOperator
from .numerics import RngStream, SpdFactor, cholesky, solve_spd
from .observations import ObservationSystem, as_operator, perturbed_innovations

VARIANT_KINDS = ("standard", "hd", "inflation", "iterative_hd", "oracle")
REPAIR_FLOOR = 1e-8


class AnomalyCovariance:
    """Sample covariance held as ``scale * A^T A`` without forming ``p x p``."""

    def __init__(self, anomalies, scale: float):
        self.anomalies = np.asarray(anomalies, dtype=float)
        self.scale = float(scale)

    @classmethod
    def of(cls, e: Ensemble) -> "AnomalyCovariance":
        return cls(e.anomalies(), 1.0 / (e.n - 1))

    def scaled(self, factor: float) -> "AnomalyCovariance":
        return AnomalyCovariance(self.anomalies, self.scale * factor)

    def dense(self) -> np.ndarray:
        return self.scale * (self.anomalies.T @ self.anomalies)


def _dense(sigma) -> np.ndarray:
    if isinstance(sigma, AnomalyCovariance):
        return sigma.dense()
    if isinstance(sigma, cov.CovarianceEstimate):
        return sigma.matrix
    return np.asarray(sigma, dtype=float)


def _gain_terms(sigma, op):
    """``(Sigma H^T, H Sigma H^T)`` for dense or anomaly-form covariances."""
    if isinstance(sigma, AnomalyCovariance):
        ha = op.apply(sigma.anomalies)
        sht = sigma.scale * (sigma.anomalies.T @ ha)
        hsht = sigma.scale * (ha.T @ ha)
        return sht, hsht
    m = _dense(sigma)
    return op.right(m), op.sandwich(m)


def kalman_gain(sigma_f, h, r) -> np.ndarray:
    """``K = Sigma H^T (H Sigma H^T + R)^{-1}`` as a ``(p, q)`` array.

    Raises
    ------
    InnovationCovarianceNotPD
        If ``H Sigma H^T + R`` cannot be Cholesky factored.
    """
    op = as_operator(h)
    r = np.asarray(r, dtype=float)
    sht, hsht = _gain_terms(sigma_f, op)
    if r.shape != hsht.shape:
        raise DimensionMismatch(f"R has shape {r.shape}, expected {hsht.shape}")
    s = hsht + r
    try:
        factor = cholesky(0.5 * (s + s.T))
    except NotPositiveDefinite as exc:
        raise InnovationCovarianceNotPD(str(exc)) from None
    return solve_spd(factor, sht.T).T


@dataclass
class KfState:
    mean: np.ndarray
    covariance: np.ndarray


def kf_analysis(state: KfState, y, h, r) -> KfState:
    op = as_operator(h)
    k = kalman_gain(state.covariance, op, r)
    mean = state.mean + k @ (np.asarray(y, dtype=float) - op.apply(state.mean))
    c = state.covariance - k @ op.right(state.covariance).T
    return KfState(mean, 0.5 * (c + c.T))


def kf_forecast(state: KfState, m, q_cov) -> KfState:
    m = np.asarray(m, dtype=float)
    p = state.mean.size
    if m.shape != (p, p) or np.shape(q_cov) != (p, p):
        raise DimensionMismatch("model and noise matrices must be p x p")
    c = m @ state.covariance @ m.T + q_cov
    return KfState(m @ state.mean, 0.5 * (c + c.T))


def enkf_forecast(
    analysis: Ensemble,
    model: ModelOperator,
    q_factor: SpdFactor | None,
    rng: RngStream | None,
    steps: int | None = None,
) -> Ensemble:
    """Propagate every member and add one ``N(0, Q)`` draw per member."""
    if model.state_dim != analysis.p:
        raise DimensionMismatch("model dimension differs from ensemble dimension")
    try:
        x = model.advance(analysis.members, steps=steps)
    except (NonFiniteState, CflViolation, FloatingPointError) as exc:
        raise ModelBlewUp(str(exc)) from None
    if q_factor is not None:
        x = x + rng.standard_normal(x.shape) @ q_factor.lower.T
    if not np.all(np.isfinite(x)):
        raise ModelBlewUp("forecast ensemble became non-finite")
    return Ensemble(x)


def _update_members(forecast: Ensemble, d: np.ndarray, sigma, obs: ObservationSystem, r):
    """Apply ``x_j + K d_j``; one PSD-repair retry on a failed factorization."""
    try:
        k = kalman_gain(sigma, obs.h, r)
        repaired = False
    except InnovationCovarianceNotPD:
        repaired_sigma = cov.psd_repair(_dense(sigma), REPAIR_FLOOR)
        k = kalman_gain(repaired_sigma, obs.h, r)
        repaired = True
    return Ensemble(forecast.members + d @ k.T), repaired


def enkf_analysis(
    forecast: Ensemble,
    y,
    obs: ObservationSystem,
    sigma_hat,
    rng: RngStream,
    r_hat=None,
    eps=None,
) -> Ensemble:
    """Perturbed-observation analysis with forecast covariance ``sigma_hat``.

    ``r_hat`` substitutes an estimated observation covariance in the gain
    (the perturbations are still drawn from the system's ``R``).
    """
    innov = perturbed_innovations(y, forecast, obs, rng, eps=eps)
    r = obs.r if r_hat is None else r_hat
    return _update_members(forecast, innov.perturbed, sigma_hat, obs, r)[0]


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-4) -> float:
    """Maximize a unimodal ``f`` on ``[lo, hi]``."""
    if hi - lo <= tol:
        return 0.5 * (lo + hi) if hi > lo else lo
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the interval endpoints are candidates too when the optimum sits on a bound
    best = max((f(lo), lo), (f(x), x), (f(hi), hi), key=lambda t: t[0])
    return best[1]


def inflation_loglik(hsht: np.ndarray, r: np.ndarray, d_mean: np.ndarray):
    """Return ``lam -> log N(d_mean; 0, lam * hsht + r)`` up to a constant."""
    lower = np.linalg.cholesky(r)
    from scipy.linalg import solve_triangular

    li = solve_triangular(lower, np.eye(r.shape[0]), lower=True)
    a = li @ hsht @ li.T
    mu, vecs = np.linalg.eigh(0.5 * (a + a.T))
    z2 = (vecs.T @ (li @ d_mean)) ** 2

    def loglik(lam):
        s = lam * mu + 1.0
        return -0.5 * float(np.sum(np.log(s) + z2 / s))

    return loglik


def estimate_inflation(d_mean, sigma_hat, obs: ObservationSystem, bounds=(1.0, 20.0), tol=1e-4) -> float:
    """Maximum-likelihood multiplicative inflation of the forecast covariance.

    Maximizes the Gaussian likelihood of the mean innovation under
    ``N(0, lam * H S H^T + R)`` over ``lam`` in ``bounds``.
    """
    lo, hi = bounds
    if lo < 1 or hi > 100 or hi < lo:
        raise ValueError("inflation bounds must satisfy 1 <= lo <= hi <= 100")
    _, hsht = _gain_terms(sigma_hat, obs.h)
    if np.trace(hsht) == 0:
        raise DegenerateLikelihood("H S H^T has zero trace")
    if hi == lo:
        return float(lo)
    f = inflation_loglik(hsht, obs.r, np.asarray(d_mean, dtype=float))
    return float(golden_section_max(f, lo, hi, tol))


@dataclass
class FilterVariant:
    """Configuration of one assimilation scheme.

    ``estimator`` names a covariance regularizer (``banding``,
    ``mid_banding``, ``tapering``, ``thresholding``) and is required for the
    ``hd`` and ``iterative_hd`` kinds.  Banded, tapered and thresholded
    sample covariances are often indefinite; unless ``psd_floor`` is None
    their eigenvalues are clipped at ``psd_floor`` before the gain is
    formed.
    """

    kind: str
    estimator: str | None = None
    mode: str = "linear"
    grid: Sequence | None = None
    splits: int = 20
    inflation_bounds: tuple = (1.0, 20.0)
    iterations: int = 3
    oracle_size: int = 1000
    name: str | None = None
    psd_floor: float | None = 0.0
    max_bandwidth: int = cov.MAX_DEFAULT_BANDWIDTH

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        needs = self.kind in ("hd", "iterative_hd")
        if needs != (self.estimator is not None):
            raise ValueError("estimator is required exactly for hd and iterative_hd variants")
        if self.kind == "iterative_hd" and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.name is None:
            if self.kind == "hd":
                self.name = self.estimator
            elif self.kind == "iterative_hd":
                self.name = f"iterative_{self.estimator}"
            else:
                self.name = self.kind


def variant_from_name(name: str, mode: str = "linear", **kw) -> FilterVariant:
    """Parse names such as ``standard``, ``banding`` or ``iterative_tapering``."""
    name = name.strip()
    estimators = ("banding", "mid_banding", "tapering", "thresholding")
    if name in ("standard", "inflation", "oracle"):
        return FilterVariant(name, mode=mode, **kw)
    if name in estimators:
        return FilterVariant("hd", name, mode=mode, **kw)
    if name.startswith("iterative_") and name[len("iterative_"):] in estimators:
        return FilterVariant("iterative_hd", name[len("iterative_"):], mode=mode, **kw)
    raise ValueError(f"unknown variant {name!r}")


@dataclass
class AnalysisInfo:
    tuning: object = None
    inflation: float | None = None
    diverged: bool = False
    repaired: bool = False
    iterations: int = 0


def _estimate(s, variant: FilterVariant, param) -> cov.CovarianceEstimate:
    est = cov.regularize(s, variant.estimator, param, variant.mode)
    if variant.psd_floor is not None:
        est.matrix = cov.psd_repair(est.matrix, variant.psd_floor)
    return est


def iterative_hd_analysis(
    forecast: Ensemble, y, obs: ObservationSystem, variant: FilterVariant, rng: RngStream
) -> tuple[Ensemble, AnalysisInfo]:
    """Regularized analysis repeated with the covariance recentered on the analysis mean.

    The first pass is the plain regularized analysis.  Each later pass
    recomputes the forecast sample covariance about the previous analysis
    mean instead of the forecast mean, regularizes it with the tuning value
    chosen in the first pass, and redoes the update from the original
    forecast members with the same observation perturbations.
    """
    innov = perturbed_innovations(y, forecast, obs, rng.child(0))
    grid = variant.grid
    if grid is None and variant.estimator != "thresholding":
        grid = cov.default_grid(variant.estimator, forecast.p, max_bandwidth=variant.max_bandwidth)
    param = cov.select_tuning(forecast, variant.estimator, variant.mode, grid, variant.splits, rng.child(1))
    sigma = _estimate(cov.sample_covariance(forecast), variant, param)
    analysis, repaired = _update_members(forecast, innov.perturbed, sigma, obs, obs.r)
    info = AnalysisInfo(tuning=param, repaired=repaired, iterations=1)
    total = variant.iterations if variant.kind == "iterative_hd" else 1
    for _ in range(1, total):
        sigma = _estimate(cov.sample_covariance(forecast, center=analysis.mean), variant, param)
        new, rep = _update_members(forecast, innov.perturbed, sigma, obs, obs.r)
        info.repaired |= rep
        info.iterations += 1
        change = np.linalg.norm(new.mean - analysis.mean) / math.sqrt(forecast.p)
        analysis = new
        if change < 1e-6:
            break
    return analysis, info


def analyze(
    variant: FilterVariant, forecast: Ensemble, y, obs: ObservationSystem, rng: RngStream
) -> tuple[Ensemble, AnalysisInfo]:
    """One analysis step of ``variant``; ``rng`` is the per-step stream."""
    if variant.kind in ("hd", "iterative_hd"):
        return iterative_hd_analysis(forecast, y, obs, variant, rng)
    innov = perturbed_innovations(y, forecast, obs, rng.child(0))
    sigma = AnomalyCovariance.of(forecast)
    info = AnalysisInfo()
    if variant.kind == "inflation":
        lam = estimate_inflation(innov.mean, sigma, obs, variant.inflation_bounds)
        sigma = sigma.scaled(lam)
        info.inflation = lam
    analysis, info.repaired = _update_members(forecast, innov.perturbed, sigma, obs, obs.r)
    return analysis, info


@dataclass
class FilterStep:
    step: int
    forecast_mean: np.ndarray
    analysis_mean: np.ndarray
    tuning: object = None
    inflation: float | None = None
    diverged: bool = False
    wall_ms: float = 0.0


@dataclass
class FilterRun:
    records: list = field(default_factory=list)
    final: Ensemble | None = None
    blew_up_at: int | None = None

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _window_factor(model: ModelOperator, steps: int, q_cov) -> SpdFactor | None:
    if q_cov is not None:
        q = np.asarray(q_cov, dtype=float) * (steps / model.steps_per_window)
    else:
        q = model.window_noise(steps)
    if q is None or not np.any(q):
        return None
    return cholesky(q)


def _forecast_to(ens, model, start, stop, q_cov, rng, factors):
    t = start
    while t < stop:
        steps = min(model.steps_per_window, stop - t)
        if steps not in factors:
            factors[steps] = _window_factor(model, steps, q_cov)
        ens = enkf_forecast(ens, model, factors[steps], rng.child(t), steps=steps)
        t += steps
    return ens


def run_filter(
    variant: FilterVariant,
    model: ModelOperator,
    obs_stream: Iterable,
    init: Ensemble,
    rng: RngStream,
    obs: ObservationSystem,
    q_cov=None,
    end_step: int | None = None,
) -> FilterRun:
    """Cycle forecasts and analyses over ``obs_stream``.

    ``obs_stream`` yields ``(step, y)`` with ``step`` counted in model
    integration steps from the initial ensemble.  Members are propagated
    one window at a time and receive one noise draw per window, with
    covariance ``q_cov`` (per full window) or the model's accumulated step
    noise.  A non-finite forecast ends the run: that step and all remaining
    observation times are recorded as diverged.  An analysis whose
    innovation covariance cannot be factored even after repair keeps the
    forecast and is flagged diverged.
    """
    if init.n < 2:
        raise ValueError("need at least 2 members")
    stream = list(obs_stream)
    steps = [int(t) for t, _ in stream]
    if any(b <= a for a, b in zip(steps, steps[1:])) or (steps and steps[0] <= 0):
        raise ValueError("observation times must be positive and strictly increasing")
    fc_rng = rng.child(0)
    an_rng = rng.child(1)
    factors: dict = {}
    run = FilterRun()
    ens = init
    t = 0
    nan = np.full(init.p, np.nan)
    for i, (step, y) in enumerate(stream):
        t0 = time.perf_counter()
        try:
            ens = _forecast_to(ens, model, t, step, q_cov, fc_rng, factors)
        except ModelBlewUp:
            run.blew_up_at = step
            for later, _ in stream[i:]:
                run.records.append(FilterStep(int(later), nan, nan, diverged=True))
            return run
        t = step
        fmean = ens.mean
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                analysis, info = analyze(variant, ens, y, obs, an_rng.child(step))
        except InnovationCovarianceNotPD:
            analysis, info = ens, AnalysisInfo(diverged=True)
        if not np.all(np.isfinite(analysis.members)):
            run.blew_up_at = step
            for later, _ in stream[i:]:
                run.records.append(FilterStep(int(later), nan, nan, diverged=True))
            return run
        ens = analysis
        run.records.append(
            FilterStep(
                step,
                fmean,
                ens.mean,
                info.tuning,
                info.inflation,
                info.diverged,
                1e3 * (time.perf_counter() - t0),
            )
        )
    if end_step is not None and end_step > t:
        try:
            ens = _forecast_to(ens, model, t, end_step, q_cov, fc_rng, factors)
        except ModelBlewUp:
            run.blew_up_at = end_step
            return run
    run.final = ens
    return run


def oracle_run(
    model: ModelOperator,
    obs_stream: Iterable,
    init: Ensemble,
    oracle_size: int,
    rng: RngStream,
    obs: ObservationSystem,
    q_cov=None,
) -> list:
    """Reference analysis means from a large-ensemble standard EnKF.

    At every observation time the Kalman update of the large ensemble's
    forecast mean, with its sample covariance standing in for the true
    forecast covariance (no observation perturbation), is emitted.  The
    ensemble itself is carried forward by the ordinary perturbed-observation
    update.  ``init`` must already hold ``oracle_size`` members.
    """
    if init.n != oracle_size:
        raise ValueError("initial oracle ensemble must have oracle_size members")
    if oracle_size < 500:
        raise ValueError("oracle_size must be at least 500")
    fc_rng = rng.child(0)
    an_rng = rng.child(1)
    factors: dict = {}
    ens = init
    t = 0
    means = []
    for step, y in obs_stream:
        step = int(step)
        ens = _forecast_to(ens, model, t, step, q_cov, fc_rng, factors)
        t = step
        sigma = AnomalyCovariance.of(ens)
        k = kalman_gain(sigma, obs.h, obs.r)
        y = np.asarray(y, dtype=float)
        means.append(ens.mean + k @ (y - obs.h.apply(ens.mean)))
        innov = perturbed_innovations(y, ens, obs, an_rng.child(step))
        ens = Ensemble(ens.members + innov.perturbed @ k.T)
    return means
