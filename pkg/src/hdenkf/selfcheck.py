"""Fast invariant checks run by ``hdenkf selfcheck``.

Each check returns ``(ok, detail)``.  :func:`run_checks` accepts a
replacement gain function so a deliberately broken formula can be fed
through the gain-bound check as a negative control.
"""

from __future__ import annotations

import time

import numpy as np

from . import covariance as cov
from .ensemble import Ensemble
from .experiments import ExperimentConfig, run_replicate
from .filters import enkf_analysis, kalman_gain
from .models import l96_rhs, make_l96_operator, L96Params, rk4_step
from .numerics import RngStream, spectral_norm
from .observations import make_selection_system


def random_spd(rng: np.random.Generator, p: int, floor: float = 0.1) -> np.ndarray:
    a = rng.standard_normal((p, p))
    return a @ a.T / p + floor * np.eye(p)


def gain_bound_fixture(rng: np.random.Generator, p_max: int = 30, q_max: int = 10):
    """Random ``(Sigma, Sigma_hat, H, R)`` with SPD covariances and dense ``H``."""
    p = int(rng.integers(2, p_max + 1))
    q = int(rng.integers(1, min(q_max, p) + 1))
    sigma = random_spd(rng, p)
    e = rng.standard_normal((p, p)) * rng.uniform(0.01, 0.5)
    sigma_hat = sigma + 0.5 * (e + e.T)
    vals = np.linalg.eigvalsh(sigma_hat)
    if vals[0] <= 0.01:
        sigma_hat = sigma_hat + (0.01 - vals[0]) * np.eye(p)
    h = rng.standard_normal((q, p))
    r = random_spd(rng, q, floor=rng.uniform(0.05, 1.0))
    return sigma, sigma_hat, h, r


def gain_bound_trials(trials: int = 200, seed: int = 0, gain_fn=kalman_gain):
    """Count trials where ``||K_hat - K|| <= ||H|| ||S_hat - S|| / lambda_min(R)``."""
    rng = RngStream(seed, (1,)).generator
    held = 0
    worst = 0.0
    for _ in range(trials):
        sigma, sigma_hat, h, r = gain_bound_fixture(rng)
        lhs = spectral_norm(gain_fn(sigma_hat, h, r) - gain_fn(sigma, h, r))
        rhs = spectral_norm(h) * spectral_norm(sigma_hat - sigma) / np.linalg.eigvalsh(r)[0]
        held += lhs <= rhs
        worst = max(worst, lhs / rhs)
    return held, worst


def check_gain_bound(gain_fn=kalman_gain):
    held, worst = gain_bound_trials(200, gain_fn=gain_fn)
    return held == 200, f"{held}/200 trials within bound, max ratio {worst:.3f}"


def check_true_gain(gain_fn=kalman_gain):
    # scalar case and a brute-force dense inverse
    rng = RngStream(0, (2,)).generator
    ok = abs(float(gain_fn(np.eye(1), np.eye(1), np.eye(1))[0, 0]) - 0.5) < 1e-12
    worst = 0.0
    for _ in range(20):
        sigma, _, h, r = gain_bound_fixture(rng, 8, 4)
        brute = sigma @ h.T @ np.linalg.inv(h @ sigma @ h.T + r)
        worst = max(worst, float(np.max(np.abs(gain_fn(sigma, h, r) - brute))))
    return ok and worst < 1e-8, f"max deviation from dense inverse {worst:.2e}"


def check_estimator_algebra():
    rng = RngStream(0, (3,))
    e = Ensemble(rng.standard_normal((12, 9)))
    s = cov.sample_covariance(e).matrix
    p = s.shape[0]
    ok = True
    ok &= np.array_equal(cov.band(s, p - 1).matrix, s)
    ok &= np.array_equal(cov.band(s, 0).matrix, np.diag(np.diag(s)))
    ok &= np.array_equal(cov.threshold(s, 0.0).matrix, s)
    ok &= np.array_equal(np.diag(cov.threshold(s, 1e9).matrix), np.diag(s))
    ok &= np.array_equal(cov.mid_band(s, p - 1, 0).matrix, s)
    ok &= np.allclose(cov.taper(s, 8).matrix.diagonal(), s.diagonal())
    ok &= float(cov.taper_weight(np.array([0]), 4)[0]) == 1.0
    ok &= np.allclose(cov.band(s, 2, "circular").matrix, cov.band(s, 2, "circular").matrix.T)
    return bool(ok), "band/threshold/mid-band/taper identities"


def check_rk4_order():
    x0 = np.linspace(-1.0, 1.0, 8) + 8.0

    def rhs(x, t):
        return l96_rhs(x, 8.0)

    def integrate(h, t_end=0.4):
        x = x0.copy()
        for _ in range(int(round(t_end / h))):
            x = rk4_step(rhs, x, 0.0, h)
        return x

    ref = integrate(0.4 / 512)
    e1 = np.linalg.norm(integrate(0.02) - ref)
    e2 = np.linalg.norm(integrate(0.01) - ref)
    ratio = e1 / e2
    return 12.0 < ratio < 20.0, f"error ratio on halving the step {ratio:.2f} (4th order -> 16)"


def check_linear_oracle():
    cfg = ExperimentConfig(
        testbed="linear_gaussian", p=10, q=5, n=2000, total_steps=50, burn_in=0, cadence=1,
        init_var=1.0, variants=("standard",), mode="linear", replicates=1,
    )
    r = float(np.mean(run_replicate(cfg, 0).traces["standard"].rmse_to_oracle))
    return r < 0.05, f"EnKF n=2000 vs exact KF time-mean RMSE {r:.4f}"


def variational_gaps(fixtures: int = 10, perturbations: int = 100, radius: float = 0.01, seed: int = 0):
    """Smallest ``J(x_a + delta) - J(x_a)`` per random analysis fixture.

    ``J`` is the quadratic cost with background ``Sigma_hat^{-1}`` and the
    observation shifted by the mean perturbation, which the analysis mean
    minimizes exactly.
    """
    rng = RngStream(seed, (4,))
    g = rng.generator
    gaps = []
    for i in range(fixtures):
        p, q, n = 6, 3, 8
        sigma = random_spd(g, p)
        r = random_spd(g, q, 0.3)
        obs = make_selection_system(p, np.sort(g.choice(p, q, replace=False)), r)
        fc = Ensemble(g.standard_normal((n, p)))
        y = g.standard_normal(q)
        eps_rng = rng.child(i)
        eps = eps_rng.standard_normal((n, q)) @ obs.r_factor.lower.T
        xa = enkf_analysis(fc, y, obs, sigma, eps_rng, eps=eps).mean
        yy = y + eps.mean(axis=0)
        si = np.linalg.inv(sigma)
        ri = np.linalg.inv(r)

        def J(x):
            dx = x - fc.mean
            dy = yy - obs.h.apply(x)
            return 0.5 * (dx @ si @ dx + dy @ ri @ dy)

        d = g.standard_normal((perturbations, p))
        d *= radius / np.linalg.norm(d, axis=1, keepdims=True)
        gaps.append(min(J(xa + di) for di in d) - J(xa))
    return np.array(gaps)


def check_variational():
    worst = float(np.min(variational_gaps(10)))
    return worst >= 0, f"min J(x_a + delta) - J(x_a) = {worst:.3e}"


def check_l96_equilibrium():
    op = make_l96_operator(L96Params(p=40, F=8.0))
    x = op.advance(np.full(40, 8.0), steps=100)
    dev = float(np.max(np.abs(x - 8.0)))
    return dev < 1e-12, f"max drift from x = F after 100 steps {dev:.1e}"


def check_determinism():
    cfg = ExperimentConfig(
        p=20, q=15, n=10, total_steps=40, burn_in=20, variants=("standard", "banding"),
        oracle_size=500, replicates=1, seed=11,
    )
    a = run_replicate(cfg, 0)
    b = run_replicate(cfg, 0)
    same = all(
        np.array_equal(a.traces[k].rmse_to_oracle, b.traces[k].rmse_to_oracle)
        and np.array_equal(a.traces[k].rmse_to_truth, b.traces[k].rmse_to_truth)
        for k in cfg.variants
    )
    return same, "two identical runs give bit-identical RMSE series"


def run_checks(gain_fn=kalman_gain) -> list:
    """Run every check; returns ``[(name, ok, detail, seconds), ...]``."""
    checks = [
        ("gain_perturbation_bound", lambda: check_gain_bound(gain_fn)),
        ("gain_formula", lambda: check_true_gain(gain_fn)),
        ("estimator_algebra", check_estimator_algebra),
        ("rk4_order", check_rk4_order),
        ("linear_gaussian_oracle", check_linear_oracle),
        ("variational_minimum", check_variational),
        ("l96_equilibrium", check_l96_equilibrium),
        ("determinism", check_determinism),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail, time.perf_counter() - t0))
    return out


def format_report(results) -> str:
    width = max(len(r[0]) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for name, ok, detail, secs in results:
        lines.append(f"{name:<{width}}  {'PASS' if ok else 'FAIL':<6}  {detail} ({secs:.2f}s)")
    passed = sum(r[1] for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
