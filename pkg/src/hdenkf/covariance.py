"""Sample covariance and its regularized high-dimensional variants.

Four estimators shrink a sample covariance ``S`` of the forecast ensemble:

* ``band``       keep entries whose index distance is at most ``k``
* ``mid_band``   keep the band ``|i-j| <= k1`` plus the wraparound corners
                 ``|i-j| >= p - k2``
* ``taper``      multiply by the piecewise-linear weight
                 ``(2/k) * ((k-d)_+ - (k/2-d)_+)``
* ``threshold``  zero off-diagonal entries whose magnitude is below ``s``

Distances are ``|i-j|`` in linear mode and ``min(|i-j|, p-|i-j|)`` in
circular mode (states living on a periodic domain).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from .ensemble import Ensemble
from .errors import (
    BandwidthOutOfRange,
    GenerationFailed,
    InsufficientMembers,
    OddTaperWidth,
)
from .numerics import RngStream

KINDS = ("sample", "banding", "mid_banding", "tapering", "thresholding")
MODES = ("linear", "circular")
MAX_DEFAULT_BANDWIDTH = 30
DEFAULT_SPLITS = 20


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    kind: str = "sample"
    distance_mode: str = "linear"
    params: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    def scaled(self, factor: float) -> "CovarianceEstimate":
        params = dict(self.params, inflation=factor)
        return CovarianceEstimate(factor * self.matrix, self.kind, self.distance_mode, params)


def _as_matrix(s) -> np.ndarray:
    if isinstance(s, CovarianceEstimate):
        return s.matrix
    return np.asarray(s, dtype=float)


@lru_cache(maxsize=32)
def _distance_matrix(p: int, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"unknown distance mode {mode!r}")
    idx = np.arange(p)
    d = np.abs(idx[:, None] - idx[None, :])
    if mode == "circular":
        d = np.minimum(d, p - d)
    d.setflags(write=False)
    return d


def index_distance(p: int, mode: str = "linear") -> np.ndarray:
    """Read-only ``(p, p)`` integer matrix of index distances."""
    return _distance_matrix(int(p), mode)


def sample_covariance(e: Ensemble, center=None) -> CovarianceEstimate:
    """Unbiased sample covariance of the members.

    ``center`` replaces the ensemble mean as the point the anomalies are
    taken about (the divisor stays ``n - 1``).
    """
    if e.n < 2:
        raise InsufficientMembers(f"need at least 2 members, got {e.n}")
    a = e.anomalies(center)
    s = a.T @ a / (e.n - 1)
    return CovarianceEstimate(0.5 * (s + s.T), "sample")


def band(s, k: int, mode: str = "linear") -> CovarianceEstimate:
    m = _as_matrix(s)
    p = m.shape[0]
    if not 0 <= k < p:
        raise BandwidthOutOfRange(f"bandwidth {k} outside [0, {p})")
    keep = index_distance(p, mode) <= k
    return CovarianceEstimate(np.where(keep, m, 0.0), "banding", mode, {"k": int(k)})


def mid_band(s, k1: int, k2: int) -> CovarianceEstimate:
    m = _as_matrix(s)
    p = m.shape[0]
    if not (0 <= k1 and 0 <= k2 and k1 < p - k2 <= p):
        raise BandwidthOutOfRange(f"need 0 <= k1 < p - k2 <= p, got k1={k1}, k2={k2}, p={p}")
    d = index_distance(p, "linear")
    keep = (d <= k1) | (d >= p - k2)
    return CovarianceEstimate(
        np.where(keep, m, 0.0), "mid_banding", "linear", {"k1": int(k1), "k2": int(k2)}
    )


def taper_weight(d, k: int) -> np.ndarray:
    """Tapering weight at index distance ``d`` for even width ``k``."""
    d = np.asarray(d, dtype=float)
    return (2.0 / k) * (np.maximum(k - d, 0.0) - np.maximum(k / 2 - d, 0.0))


def taper(s, k: int, mode: str = "linear") -> CovarianceEstimate:
    m = _as_matrix(s)
    p = m.shape[0]
    if not 1 <= k <= p:
        raise BandwidthOutOfRange(f"taper width {k} outside [1, {p}]")
    if k % 2:
        raise OddTaperWidth(f"taper width must be even, got {k}")
    w = taper_weight(index_distance(p, mode), k)
    return CovarianceEstimate(m * w, "tapering", mode, {"k": int(k)})


def threshold(s, level: float) -> CovarianceEstimate:
    """Hard-threshold off-diagonal entries; the diagonal is always kept."""
    if level < 0:
        raise ValueError("threshold level must be nonnegative")
    m = _as_matrix(s)
    keep = np.abs(m) >= level
    np.fill_diagonal(keep, True)
    return CovarianceEstimate(np.where(keep, m, 0.0), "thresholding", "linear", {"s": float(level)})


def regularize(s, kind: str, param, mode: str = "linear") -> CovarianceEstimate:
    """Apply the estimator ``kind`` with tuning value ``param``."""
    if kind == "sample":
        m = _as_matrix(s)
        return CovarianceEstimate(m, "sample", mode)
    if kind == "banding":
        return band(s, int(param), mode)
    if kind == "mid_banding":
        k1, k2 = param
        return mid_band(s, int(k1), int(k2))
    if kind == "tapering":
        return taper(s, int(param), mode)
    if kind == "thresholding":
        return threshold(s, float(param))
    raise ValueError(f"unknown estimator kind {kind!r}")


def default_grid(kind: str, p: int, s=None, max_bandwidth: int = MAX_DEFAULT_BANDWIDTH) -> list:
    """Candidate tuning values searched by :func:`select_tuning`."""
    kmax = min(p - 1, max_bandwidth)
    if kind == "banding":
        return list(range(0, kmax + 1))
    if kind == "tapering":
        return [k for k in range(2, min(p, max_bandwidth) + 1, 2)]
    if kind == "mid_banding":
        return [(k1, k2) for k1 in range(kmax + 1) for k2 in range(kmax + 1 - k1) if k1 < p - k2]
    if kind == "thresholding":
        if s is None:
            raise ValueError("thresholding grid needs the sample covariance")
        m = _as_matrix(s)
        off = np.abs(m[~np.eye(m.shape[0], dtype=bool)])
        lo, hi = np.percentile(off, [50, 100])
        if lo <= 0.0:
            lo = hi * 1e-3 if hi > 0 else 1e-12
            hi = max(hi, lo)
        return list(np.geomspace(lo, hi, 20))
    raise ValueError(f"no tuning grid for kind {kind!r}")


def _weights_by_distance(kind: str, grid: Sequence, p: int, mode: str) -> np.ndarray:
    """Rows of per-distance weights, one row per grid value."""
    if kind == "mid_banding":
        d = np.arange(p)
        return np.array([((d <= k1) | (d >= p - k2)).astype(float) for k1, k2 in grid])
    dmax = p - 1 if mode == "linear" else p // 2
    d = np.arange(dmax + 1)
    if kind == "banding":
        return np.array([(d <= k).astype(float) for k in grid])
    if kind == "tapering":
        return np.array([taper_weight(d, k) for k in grid])
    raise ValueError(kind)


def _distance_risks(weights, s1, s2, dist) -> np.ndarray:
    # ||W o S1 - S2||_F^2 expands into per-distance sums because W depends only on distance
    flat = dist.ravel()
    nb = weights.shape[1]
    a = np.bincount(flat, (s1 * s1).ravel(), minlength=nb)
    b = np.bincount(flat, (s1 * s2).ravel(), minlength=nb)
    c = np.bincount(flat, (s2 * s2).ravel(), minlength=nb)
    return (weights**2) @ a - 2.0 * weights @ b + c.sum()


def _threshold_risks(levels, s1, s2) -> np.ndarray:
    p = s1.shape[0]
    diag = float(np.sum((np.diag(s1) - np.diag(s2)) ** 2))
    iu = np.triu_indices(p, 1)
    v = np.abs(s1[iu])
    gain = 2.0 * ((s1[iu] - s2[iu]) ** 2 - s2[iu] ** 2)
    base = 2.0 * float(np.sum(s2[iu] ** 2)) + diag
    order = np.argsort(v)
    v = v[order]
    tail = np.concatenate([np.cumsum(gain[order][::-1])[::-1], [0.0]])
    pos = np.searchsorted(v, np.asarray(levels, dtype=float), side="left")
    return base + tail[pos]


def _most_regularized_first(kind: str, grid: list) -> list:
    if kind == "thresholding":
        return sorted(grid, reverse=True)
    if kind == "mid_banding":
        return sorted(grid, key=lambda kk: (kk[0] + kk[1], kk[0]))
    return sorted(grid)


def split_risks(e: Ensemble, kind: str, mode: str, grid: list, splits: int, rng: RngStream):
    """Average held-out Frobenius risk for each grid value."""
    x = e.members
    n, p = x.shape
    half = n // 2
    risks = np.zeros(len(grid))
    if kind == "mid_banding":
        dist = index_distance(p, "linear")
    elif kind != "thresholding":
        dist = index_distance(p, mode)
    if kind != "thresholding":
        weights = _weights_by_distance(kind, grid, p, mode)
    for i in range(splits):
        perm = rng.child(i).generator.permutation(n)
        a = x[perm[:half]]
        b = x[perm[half:]]
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        s1 = a.T @ a / (a.shape[0] - 1)
        s2 = b.T @ b / (b.shape[0] - 1)
        if kind == "thresholding":
            risks += _threshold_risks(grid, s1, s2)
        else:
            risks += _distance_risks(weights, s1, s2, dist)
    return risks / splits


def select_tuning(
    e: Ensemble,
    kind: str,
    mode: str = "linear",
    grid=None,
    splits: int = DEFAULT_SPLITS,
    rng: RngStream | None = None,
) -> Any:
    """Pick the tuning value minimizing the split-sample Frobenius risk.

    Each of ``splits`` random halvings of the members yields two sample
    covariances; the estimator is applied to the first and scored against
    the second.  Ties go to the most regularized candidate.
    """
    if e.n < 4:
        raise InsufficientMembers(f"tuning selection needs at least 4 members, got {e.n}")
    if splits < 1:
        raise ValueError("splits must be >= 1")
    if grid is None:
        grid = default_grid(kind, e.p, sample_covariance(e) if kind == "thresholding" else None)
    grid = _most_regularized_first(kind, list(grid))
    if not grid:
        raise ValueError("empty tuning grid")
    if len(grid) == 1:
        return grid[0]
    if rng is None:
        rng = RngStream(0)
    risks = split_risks(e, kind, mode, grid, splits, rng)
    return grid[int(np.argmin(risks))]


def subdiagonal_energy(sigma, k: int) -> float:
    """Mean square of the ``k``-th subdiagonal."""
    m = _as_matrix(sigma)
    p = m.shape[0]
    if not 0 <= k < p:
        raise BandwidthOutOfRange(f"k={k} outside [0, {p})")
    return float(np.mean(np.diagonal(m, offset=k) ** 2))


def psd_repair(m, floor: float = 0.0) -> np.ndarray:
    """Clip eigenvalues below ``floor`` up to ``floor``."""
    m = _as_matrix(m)
    vals, vecs = np.linalg.eigh(m)
    if vals[0] >= floor:
        return m
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# structured covariance classes


@dataclass
class ClassSpec:
    """Parameters of a structured covariance class.

    ``kind`` is one of ``bandable``, ``circular_bandable`` or
    ``threshold_sparse``.  ``C=None`` resolves to 1 for the bandable class
    and to ``p**alpha`` for the circular class, whose tail inequality only
    decays in ``k1 + k2`` and therefore needs a dimension-sized constant.
    ``rho`` fixes the geometric decay of the bandable generators; by
    default it is ``exp(-alpha)``.
    """

    kind: str
    p: int
    alpha: float = 1.0
    C: float | None = None
    eps0: float = 0.1
    gamma: float = 0.0
    c0: float | None = None
    M: float = 1.0
    rho: float | None = None

    def resolved_C(self) -> float:
        if self.C is not None:
            return self.C
        return float(self.p) ** self.alpha if self.kind == "circular_bandable" else 1.0


def _row_distance_sums(sigma: np.ndarray) -> np.ndarray:
    """``out[j, d]`` = sum of ``|sigma[i, j]|`` over ``|i - j| == d``."""
    p = sigma.shape[0]
    d = index_distance(p, "linear")
    rows = np.repeat(np.arange(p), p)
    out = np.zeros((p, p))
    np.add.at(out, (rows, d.ravel()), np.abs(sigma).ravel())
    return out


def bandable_tail(sigma) -> np.ndarray:
    """``tail[k] = max_j sum_{|i-j|>k} |sigma_ij|`` for ``k = 0..p-1``."""
    r = _row_distance_sums(_as_matrix(sigma))
    tails = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
    tails = np.concatenate([tails[:, 1:], np.zeros((r.shape[0], 1))], axis=1)
    return tails.max(axis=0)


def circular_tail(sigma) -> np.ndarray:
    """``out[k1, k2] = max_j sum_{k1<|i-j|<p-k2} |sigma_ij|``."""
    r = _row_distance_sums(_as_matrix(sigma))
    p = r.shape[0]
    c = np.concatenate([np.zeros((p, 1)), np.cumsum(r, axis=1)], axis=1)  # c[:, m] = sum_{d<m}
    k = np.arange(p)
    lo = k + 1
    hi = p - k
    sums = c[:, hi][:, None, :] - c[:, lo][:, :, None]
    return np.maximum(sums, 0.0).max(axis=0)


def satisfies_class(sigma, spec: ClassSpec, rtol: float = 1e-9) -> bool:
    m = _as_matrix(sigma)
    p = m.shape[0]
    vals = np.linalg.eigvalsh(m)
    C = spec.resolved_C()
    if spec.kind == "bandable":
        if vals[0] < spec.eps0 * (1 - rtol) or vals[-1] > (1 / spec.eps0) * (1 + rtol):
            return False
        k = np.arange(1, p)
        return bool(np.all(bandable_tail(m)[1:] <= C * k ** (-spec.alpha) * (1 + rtol)))
    if spec.kind == "circular_bandable":
        if vals[0] < spec.eps0 * (1 - rtol) or vals[-1] > (1 / spec.eps0) * (1 + rtol):
            return False
        t = circular_tail(m)
        k1, k2 = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        valid = (k1 > 0) & (k2 > 0)
        bound = C * np.where(valid, k1 + k2, 1.0) ** (-spec.alpha)
        return bool(np.all(t[valid] <= bound[valid] * (1 + rtol)))
    if spec.kind == "threshold_sparse":
        if np.max(np.diag(m)) > spec.M * (1 + rtol) or vals[0] < spec.eps0 * (1 - rtol):
            return False
        c0 = spec.c0 if spec.c0 is not None else float(p)
        a = np.abs(m)
        powered = np.where(a > 0, a ** spec.gamma, 0.0) if spec.gamma > 0 else (a > 0).astype(float)
        return bool(np.all(powered.sum(axis=1) <= c0 * (1 + rtol)))
    raise ValueError(f"unknown class {spec.kind!r}")


def _clip_spectrum(m, lo, hi):
    vals, vecs = np.linalg.eigh(m)
    if vals[0] >= lo and vals[-1] <= hi:
        return m
    out = (vecs * np.clip(vals, lo, hi)) @ vecs.T
    return 0.5 * (out + out.T)


def _threshold_sparse_candidate(spec: ClassSpec, rng: np.random.Generator, attempt: int):
    p = spec.p
    c0 = spec.c0 if spec.c0 is not None else float(p)
    amax = 0.5 * spec.M
    # off-diagonal budget per row, halved on every failed attempt
    if spec.gamma > 0:
        room = (c0 - spec.M**spec.gamma) / amax**spec.gamma
    else:
        room = c0 - 1
    per_row = int(max(0, min(p - 1, np.floor(room)))) >> attempt
    pattern = np.zeros((p, p), dtype=bool)
    if per_row >= p - 1:
        pattern[:] = True
    elif per_row > 0:
        for i in range(p):
            partners = rng.choice(np.delete(np.arange(p), i), size=per_row, replace=False)
            pattern[i, partners] = True
        pattern = np.triu(pattern | pattern.T, 1)
        # prune rows that the symmetric union pushed over budget
        for i in range(p):
            row = np.flatnonzero(pattern[i] | pattern[:, i])
            extra = row.size - per_row
            if extra > 0:
                drop = rng.choice(row, size=extra, replace=False)
                pattern[i, drop] = False
                pattern[drop, i] = False
    pattern = np.triu(pattern, 1)
    vals = amax * rng.uniform(0.2, 1.0, size=(p, p)) * rng.choice([-1.0, 1.0], size=(p, p))
    off = np.where(pattern, vals, 0.0)
    off = off + off.T
    # Gershgorin: off-diagonal row sums below M - eps0 keep lambda_min >= eps0
    rowsum = np.abs(off).sum(axis=1).max()
    budget = 0.999 * (spec.M - spec.eps0)
    if rowsum > budget:
        off *= budget / rowsum
    return off + spec.M * np.eye(p)


def generate_class_member(spec: ClassSpec, rng: RngStream) -> np.ndarray:
    """Draw a covariance matrix from one of the structured classes.

    The class inequality is checked on the output; up to 10 attempts are
    made with progressively faster decay (bandable) or sparser rows
    (threshold-sparse) before giving up.
    """
    if spec.alpha <= 0 or spec.eps0 <= 0 or not 0 <= spec.gamma < 1:
        raise ValueError("inconsistent ClassSpec")
    p = spec.p
    rho = spec.rho if spec.rho is not None else float(np.exp(-spec.alpha))
    for attempt in range(10):
        if spec.kind == "bandable":
            m = rho ** index_distance(p, "linear").astype(float)
            m = _clip_spectrum(m, spec.eps0, 1 / spec.eps0)
            rho = rho * rho
        elif spec.kind == "circular_bandable":
            m = rho ** index_distance(p, "circular").astype(float)
            m = _clip_spectrum(m, spec.eps0, 1 / spec.eps0)
            rho = rho * rho
        elif spec.kind == "threshold_sparse":
            m = _threshold_sparse_candidate(spec, rng.generator, attempt)
            m = psd_repair(m, spec.eps0)
        else:
            raise ValueError(f"unknown class {spec.kind!r}")
        if satisfies_class(m, spec):
            return m
    raise GenerationFailed(f"could not satisfy the {spec.kind} class inequality in 10 attempts")
