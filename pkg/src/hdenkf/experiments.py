"""Twin experiments: simulate a truth, observe it, assimilate, score.

Each replicate draws its own truth, observation locations, observations
and initial ensembles from streams keyed by ``(seed, replicate)``.  All
variants inside a replicate share those inputs (paired design); only the
randomness inside each filter run depends on the variant name.
"""

from __future__ import annotations

import csv
import io
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .covariance import DEFAULT_SPLITS
from .ensemble import Ensemble
from .errors import DimensionMismatch, ModelBlewUp
from .filters import FilterVariant, KfState, kf_analysis, kf_forecast, oracle_run, run_filter, variant_from_name
from .models import (
    L96Params,
    SweParams,
    l96_initial_state,
    make_l96_operator,
    make_linear_operator,
    make_swe_operator,
    swe_flatten,
    swe_init,
)
from .numerics import RngStream, SpdFactor, cholesky
from .observations import (
    ObservationSystem,
    make_block_diag_r,
    make_circular_r,
    make_selection_system,
    observe_truth,
    random_indices,
)

TESTBEDS = ("l96", "swe", "linear_gaussian")
CSV_HEADER = [
    "testbed",
    "variant",
    "target",
    "param_override",
    "n",
    "p",
    "q",
    "mean_rmse",
    "q25",
    "q75",
    "div_rate",
    "seed",
]
PLOT_HEADER = ["step", "variant", "rmse_to_oracle", "rmse_to_truth"]

# fixed stream ids inside a replicate
_TRUTH, _OBS, _INIT, _ORACLE, _FREE = 0, 1, 2, 3, 4
_FREE_RUN_REPLICATE = 2**31 - 1


@dataclass
class ExperimentConfig:
    """Flat description of one experiment (one value per parameter).

    Step counts are model integration steps.  ``cadence`` is the number of
    steps between observations; results are reported for analyses at
    steps strictly after ``burn_in``.
    """

    testbed: str = "l96"
    n: int = 30
    q: int = 30
    variants: tuple = ("standard", "inflation", "banding", "tapering", "thresholding")
    mode: str = "circular"
    replicates: int = 20
    seed: int = 0
    oracle_size: int = 1000
    divergence_factor: float = 2.0
    total_steps: int = 2000
    burn_in: int = 1000
    cadence: int = 4
    init_var: float = 0.1
    splits: int = DEFAULT_SPLITS
    iterations: int = 3
    inflation_min: float = 1.0
    inflation_max: float = 20.0
    psd_project: bool = True
    max_bandwidth: int = 30
    # Lorenz-96
    p: int = 40
    F_true: float = 8.0
    F_assim: float = 8.0
    dt: float = 0.05
    sigma0: float = 0.1
    noise_is_variance: bool = False
    window_q: str = "accumulated"
    r_rho: float = 0.5
    # shallow water
    nx: int = 50
    ny: int = 31
    dx: float = 10e3
    dy: float = 10e3
    swe_dt: float = 30.0
    k_diff_true: float = 5e4
    k_diff_assim: float = 5e4
    obs_columns: int = 10
    obs_var_u: float = 0.5
    obs_var_v: float = 0.5
    obs_var_h: float = 1.0
    pre_steps: int = 60
    # linear Gaussian
    lin_a: float = 0.9
    lin_b: float = 0.1
    lin_q: float = 0.1
    lin_r: float = 0.5

    def __post_init__(self):
        if isinstance(self.variants, str):
            self.variants = tuple(v.strip() for v in self.variants.split(",") if v.strip())
        self.variants = tuple(self.variants)
        self.validate()

    def validate(self):
        if self.testbed not in TESTBEDS:
            raise ValueError(f"unknown testbed {self.testbed!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 <= self.burn_in < self.total_steps:
            raise ValueError("burn-in must be smaller than the total number of steps")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.n < 2:
            raise ValueError("ensemble size must be >= 2")
        if self.window_q not in ("accumulated", "single"):
            raise ValueError("window_q must be 'accumulated' or 'single'")
        for name in self.variants:
            variant_from_name(name)

    @property
    def state_dim(self) -> int:
        if self.testbed == "swe":
            return 3 * self.nx * self.ny
        return self.p

    @property
    def obs_steps(self) -> list:
        return list(range(self.cadence, self.total_steps + 1, self.cadence))

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def filter_variant(self, name: str) -> FilterVariant:
        return variant_from_name(
            name,
            mode=self.mode,
            splits=self.splits,
            iterations=self.iterations,
            inflation_bounds=(self.inflation_min, self.inflation_max),
            oracle_size=self.oracle_size,
            psd_floor=0.0 if self.psd_project else None,
            max_bandwidth=self.max_bandwidth,
        )


def config_field_types() -> dict:
    """Map each config key to the python type used to parse it."""
    out = {}
    for f in fields(ExperimentConfig):
        default = f.default
        out[f.name] = tuple if isinstance(default, tuple) else type(default)
    return out


def rmse(a, b) -> float:
    """``||a - b|| / sqrt(p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.linalg.norm(a - b) / math.sqrt(a.size))


def detect_divergence(series, threshold: float) -> bool:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    s = np.asarray(series, dtype=float)
    return bool(np.any(~np.isfinite(s)) or np.any(s > threshold))


@dataclass
class Testbed:
    """Everything a replicate needs: truth, observations and the two models."""

    truth: np.ndarray  # (len(obs_steps), p) true states at observation times
    x1: np.ndarray
    observations: list
    obs: ObservationSystem
    model_assim: object
    model_true: object
    q_cov: np.ndarray | None
    q_cov_true: np.ndarray | None
    kf_init: KfState | None = None
    m_true: np.ndarray | None = None


def _linear_matrix(cfg: ExperimentConfig) -> np.ndarray:
    p = cfg.p
    return cfg.lin_a * np.eye(p) + cfg.lin_b * np.roll(np.eye(p), 1, axis=1)


def _linear_window_noise(m, q_step, steps: int) -> np.ndarray:
    """Covariance of per-step noise accumulated through ``steps`` linear steps."""
    q = np.zeros_like(q_step)
    for _ in range(steps):
        q = m @ q @ m.T + q_step
    return q


def _swe_params(cfg: ExperimentConfig, k_diff: float) -> SweParams:
    return SweParams(
        nx=cfg.nx, ny=cfg.ny, dx=cfg.dx, dy=cfg.dy, dt=cfg.swe_dt, k_diff=k_diff,
        L=cfg.nx * cfg.dx, D=(cfg.ny - 1) * cfg.dy, steps_per_window=cfg.cadence,
    )


def _observation_system(cfg: ExperimentConfig, rng: RngStream) -> ObservationSystem:
    p = cfg.state_dim
    if cfg.testbed == "l96":
        idx = random_indices(p, cfg.q, rng)
        return make_selection_system(p, idx, make_circular_r(cfg.q, cfg.r_rho))
    if cfg.testbed == "linear_gaussian":
        idx = np.arange(0, p, max(1, p // cfg.q))[: cfg.q]
        return make_selection_system(p, idx, cfg.lin_r * np.eye(idx.size))
    # shallow water: every grid point of obs_columns random columns, in all three fields
    cols = np.sort(rng.generator.choice(cfg.nx, size=cfg.obs_columns, replace=False))
    cell = (np.arange(cfg.ny)[:, None] * cfg.nx + cols[None, :]).ravel()
    cell.sort()
    block = cfg.nx * cfg.ny
    idx = np.concatenate([cell, cell + block, cell + 2 * block])
    m = cell.size
    r = make_block_diag_r([(m, cfg.obs_var_u), (m, cfg.obs_var_v), (m, cfg.obs_var_h)])
    return make_selection_system(p, idx, r)


def build_testbed(cfg: ExperimentConfig, rng: RngStream) -> Testbed:
    """Simulate the truth and observations for one replicate."""
    truth_rng = rng.child(_TRUTH)
    obs_rng = rng.child(_OBS)
    kf_init = m_true = None
    if cfg.testbed == "l96":
        std = math.sqrt(cfg.sigma0) if cfg.noise_is_variance else cfg.sigma0
        model_true = make_l96_operator(L96Params(cfg.p, cfg.F_true, cfg.dt, cfg.cadence, std))
        model_assim = make_l96_operator(L96Params(cfg.p, cfg.F_assim, cfg.dt, cfg.cadence, std))
        x1 = l96_initial_state(cfg.p, cfg.F_true)
        if cfg.window_q == "accumulated":
            q_cov = model_assim.window_noise()
        else:
            q_cov = std**2 * np.eye(cfg.p)
        q_cov_true = q_cov
    elif cfg.testbed == "swe":
        model_true = make_swe_operator(_swe_params(cfg, cfg.k_diff_true))
        model_assim = make_swe_operator(_swe_params(cfg, cfg.k_diff_assim))
        x0 = swe_flatten(swe_init(_swe_params(cfg, cfg.k_diff_true)))
        x1 = model_true.advance(x0, steps=cfg.pre_steps) if cfg.pre_steps else x0
        q_cov = q_cov_true = None
    else:
        m_true = _linear_matrix(cfg)
        noise = SpdFactor(math.sqrt(cfg.lin_q) * np.eye(cfg.p))
        model_true = model_assim = make_linear_operator(m_true, noise)
        model_true.steps_per_window = cfg.cadence
        x1 = truth_rng.child(1).standard_normal(cfg.p)
        q_cov = q_cov_true = _linear_window_noise(m_true, cfg.lin_q * np.eye(cfg.p), cfg.cadence)
        kf_init = KfState(x1.copy(), cfg.init_var * np.eye(cfg.p))
    obs = _observation_system(cfg, obs_rng.child(0))
    states = []
    x = x1
    step_rng = truth_rng.child(0)
    t = 0
    for s in cfg.obs_steps:
        x = model_true.advance(x, t=t, steps=s - t, rng=step_rng)
        t = s
        states.append(x)
    truth = np.array(states).reshape(len(states), np.size(x1))
    y_rng = obs_rng.child(1)
    observations = [observe_truth(xt, obs, y_rng.child(s)) for s, xt in zip(cfg.obs_steps, truth)]
    return Testbed(truth, x1, observations, obs, model_assim, model_true, q_cov, q_cov_true, kf_init, m_true)


def initial_ensemble(cfg: ExperimentConfig, x1, n: int, rng: RngStream) -> Ensemble:
    """``x1 + N(0, init_var * I)`` members."""
    z = rng.standard_normal((n, np.size(x1)))
    return Ensemble(np.asarray(x1)[None, :] + math.sqrt(cfg.init_var) * z)


def exact_kf_means(tb: Testbed, cfg: ExperimentConfig) -> list:
    """Exact KF analysis means for the linear Gaussian testbed."""
    state = tb.kf_init
    m_window = np.linalg.matrix_power(tb.m_true, cfg.cadence)
    q_window = tb.q_cov_true
    means = []
    for y in tb.observations:
        state = kf_forecast(state, m_window, q_window)
        state = kf_analysis(state, y, tb.obs.h, tb.obs.r)
        means.append(state.mean)
    return means


def oracle_means(tb: Testbed, cfg: ExperimentConfig, rng: RngStream) -> np.ndarray:
    """Reference analysis means (exact KF when available, else a large ensemble)."""
    if cfg.testbed == "linear_gaussian":
        return np.array(exact_kf_means(tb, cfg))
    init = initial_ensemble(cfg, tb.x1, cfg.oracle_size, rng.child(0))
    stream = list(zip(cfg.obs_steps, tb.observations))
    try:
        means = oracle_run(tb.model_true, stream, init, cfg.oracle_size, rng.child(1), tb.obs, tb.q_cov_true)
    except ModelBlewUp:
        return np.full(tb.truth.shape, np.nan)
    return np.array(means)


@dataclass
class VariantTrace:
    """Per-analysis results of one variant in one replicate."""

    variant: str
    steps: np.ndarray
    rmse_to_oracle: np.ndarray
    rmse_to_truth: np.ndarray
    tuning: list
    inflation: list
    flagged: np.ndarray
    wall_ms: np.ndarray
    diverged: bool = False

    def records(self):
        for i, s in enumerate(self.steps):
            yield AssimilationRecord(
                int(s),
                self.variant,
                float(self.rmse_to_oracle[i]),
                float(self.rmse_to_truth[i]),
                self.tuning[i],
                self.inflation[i],
                bool(self.flagged[i] or self.diverged),
                float(self.wall_ms[i]),
            )


@dataclass
class AssimilationRecord:
    step: int
    variant: str
    rmse_to_oracle: float
    rmse_to_truth: float
    tuning: object = None
    inflation: float | None = None
    diverged: bool = False
    wall_ms: float = 0.0


@dataclass
class ReplicateResult:
    replicate: int
    traces: dict = field(default_factory=dict)


def variant_stream_id(name: str) -> int:
    return 16 + (zlib.crc32(name.encode()) & 0x7FFFFFFF)


def _trace(name, steps, means_a, oracle, truth, tuning, inflation, flagged, wall) -> VariantTrace:
    ro = np.array([rmse(a, o) for a, o in zip(means_a, oracle)])
    rt = np.array([rmse(a, t) for a, t in zip(means_a, truth)])
    return VariantTrace(
        name, np.asarray(steps), ro, rt, list(tuning), list(inflation),
        np.asarray(flagged, dtype=bool), np.asarray(wall, dtype=float),
    )


def run_replicate(cfg: ExperimentConfig, replicate_id: int, threshold: float | None = None) -> ReplicateResult:
    """Run every configured variant on one simulated truth.

    With ``threshold`` given, each trace is also checked for divergence
    over the reported window.
    """
    rng = RngStream(cfg.seed, (replicate_id,))
    tb = build_testbed(cfg, rng)
    oracle = oracle_means(tb, cfg, rng.child(_ORACLE))
    init = initial_ensemble(cfg, tb.x1, cfg.n, rng.child(_INIT))
    stream = list(zip(cfg.obs_steps, tb.observations))
    out = ReplicateResult(replicate_id)
    steps = cfg.obs_steps
    for name in cfg.variants:
        if name == "oracle":
            k = len(steps)
            tr = _trace(name, steps, oracle, oracle, tb.truth, [None] * k, [None] * k, np.zeros(k), np.zeros(k))
        else:
            variant = cfg.filter_variant(name)
            run = run_filter(
                variant, tb.model_assim, stream, init, rng.child(variant_stream_id(name)), tb.obs, tb.q_cov,
                end_step=cfg.total_steps,
            )
            tr = _trace(
                name,
                [r.step for r in run],
                [r.analysis_mean for r in run],
                oracle,
                tb.truth,
                [r.tuning for r in run],
                [r.inflation for r in run],
                [r.diverged for r in run],
                [r.wall_ms for r in run],
            )
        if threshold is not None:
            tr.diverged = trace_diverged(tr, cfg.burn_in, threshold)
        out.traces[name] = tr
    return out


def trace_diverged(tr: VariantTrace, burn_in: int, threshold: float) -> bool:
    post = tr.steps > burn_in
    return bool(np.any(tr.flagged[post]) or detect_divergence(tr.rmse_to_truth[post], threshold))


def free_run_rmse(cfg: ExperimentConfig) -> float:
    """Time-mean post-burn-in RMSE to truth of the initial members run without assimilation.

    The members are integrated with the assimilation model and no added
    noise; their RMSEs are averaged over members and reported steps.
    """
    rng = RngStream(cfg.seed, (_FREE_RUN_REPLICATE,))
    tb = build_testbed(cfg, rng)
    x = initial_ensemble(cfg, tb.x1, cfg.n, rng.child(_INIT)).members
    t = 0
    errs = []
    for s, xt in zip(cfg.obs_steps, tb.truth):
        try:
            x = tb.model_assim.advance(x, steps=s - t)
        except FloatingPointError:
            x = np.full_like(x, np.nan)
        t = s
        if s > cfg.burn_in:
            errs.append(np.linalg.norm(x - xt, axis=1) / math.sqrt(xt.size))
    if not errs:
        return math.inf
    val = float(np.mean(errs))
    if not math.isfinite(val) or val <= 0:
        raise ModelBlewUp("free run did not produce a usable reference RMSE")
    return val


def _replicate_worker(args):
    cfg, rid, threshold = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return run_replicate(cfg, rid, threshold)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Run all replicates and return ``{"replicates": [...], "threshold": t}``.

    Replicates are independent, so they may run in separate processes;
    results are always reduced in replicate order.  BLAS is pinned to one
    thread so the numbers do not depend on ``workers``.
    """
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        threshold = cfg.divergence_factor * free_run_rmse(cfg)
    if not math.isfinite(threshold):
        threshold = None
    jobs = [(cfg, r, threshold) for r in range(cfg.replicates)]
    if workers > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.replicates)) as pool:
            reps = list(pool.map(_replicate_worker, jobs))
    else:
        reps = [_replicate_worker(j) for j in jobs]
    reps.sort(key=lambda r: r.replicate)
    return {"replicates": reps, "threshold": threshold}


@dataclass
class SummaryRow:
    testbed: str
    variant: str
    target: str
    param_override: str
    n: int
    p: int
    q: int
    mean_rmse: float | None
    q25: float | None
    q75: float | None
    div_rate: float
    seed: int


def replicate_means(reps, variant: str, target: str, burn_in: int):
    """Post-burn-in time means of non-diverged replicates, and the diverged count."""
    means = []
    diverged = 0
    for rep in reps:
        tr = rep.traces[variant]
        if tr.diverged:
            diverged += 1
            continue
        vals = tr.rmse_to_oracle if target == "oracle" else tr.rmse_to_truth
        post = vals[tr.steps > burn_in]
        if post.size:
            means.append(float(np.mean(post)))
    return means, diverged


def aggregate(reps, cfg: ExperimentConfig, param_override: str = "") -> list:
    """One summary row per (variant, target)."""
    if not reps:
        raise ValueError("need at least one replicate")
    rows = []
    for target in ("oracle", "true"):
        for name in cfg.variants:
            means, diverged = replicate_means(reps, name, target, cfg.burn_in)
            if means:
                m = float(np.mean(means))
                q25, q75 = (float(v) for v in np.quantile(means, [0.25, 0.75]))
            else:
                m = q25 = q75 = None
            rows.append(
                SummaryRow(
                    cfg.testbed, name, target, param_override, cfg.n, cfg.state_dim,
                    _obs_count(cfg), m, q25, q75, diverged / len(reps), cfg.seed,
                )
            )
    return rows


def _obs_count(cfg: ExperimentConfig) -> int:
    if cfg.testbed == "swe":
        return 3 * cfg.ny * cfg.obs_columns
    return cfg.q


def step_series(reps, cfg: ExperimentConfig) -> list:
    """Per-step RMSEs averaged over non-diverged replicates, as plot rows."""
    rows = []
    for name in cfg.variants:
        kept = [r.traces[name] for r in reps if not r.traces[name].diverged]
        steps = reps[0].traces[name].steps
        for i, s in enumerate(steps):
            if kept:
                ro = float(np.mean([t.rmse_to_oracle[i] for t in kept]))
                rt = float(np.mean([t.rmse_to_truth[i] for t in kept]))
            else:
                ro = rt = None
            rows.append((int(s), name, ro, rt))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_float(s: str):
    return None if s == "" else float(s)


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    return buf.getvalue()


def parse_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError("unexpected summary header")
    rows = []
    for rec in reader:
        if not rec:
            continue
        d = dict(zip(CSV_HEADER, rec))
        rows.append(
            SummaryRow(
                d["testbed"], d["variant"], d["target"], d["param_override"],
                int(d["n"]), int(d["p"]), int(d["q"]),
                _parse_float(d["mean_rmse"]), _parse_float(d["q25"]), _parse_float(d["q75"]),
                float(d["div_rate"]), int(d["seed"]),
            )
        )
    return rows


def format_plotdata(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def parse_plotdata(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    if next(reader, None) != PLOT_HEADER:
        raise ValueError("unexpected plotdata header")
    return [(int(s), v, _parse_float(a), _parse_float(b)) for s, v, a, b in reader]


def export(rows, path, format: str = "csv") -> None:
    """Write summary rows (``csv``) or per-step rows (``plotdata``) to ``path``."""
    if format == "csv":
        text = format_csv(rows)
    elif format == "plotdata":
        text = format_plotdata(rows)
    else:
        raise ValueError(f"unknown export format {format!r}")
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
