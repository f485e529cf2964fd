"""Observation operators, observation error covariances and synthetic data.

The selection operator ``H`` is stored as an index list: applying it is a
gather, applying ``H^T`` is a scatter, and ``H S H^T`` is a submatrix.
General dense operators are also accepted wherever an operator is expected
so that gain formulas can be exercised with arbitrary ``H``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import Ensemble
from .errors import DimensionMismatch, InvalidIndices
from .numerics import RngStream, SpdFactor, cholesky


class SelectionOperator:
    """``H`` with ``H[j, indices[j]] = 1`` and zeros elsewhere."""

    def __init__(self, p: int, indices):
        idx = np.asarray(indices, dtype=int)
        if idx.ndim != 1 or idx.size == 0:
            raise InvalidIndices("need a nonempty 1-d index list")
        if np.any(idx < 0) or np.any(idx >= p):
            raise InvalidIndices(f"indices must lie in [0, {p})")
        if np.any(np.diff(idx) <= 0):
            raise InvalidIndices("indices must be strictly increasing (hence distinct)")
        self.p = int(p)
        self.indices = idx
        self.indices.setflags(write=False)

    @property
    def q(self) -> int:
        return self.indices.size

    def apply(self, x):
        """``H x`` along the last axis, so ensembles map row-wise."""
        return np.asarray(x)[..., self.indices]

    def adjoint(self, z):
        """Scatter ``z`` (length ``q`` on the last axis) back to state space."""
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + (self.p,))
        out[..., self.indices] = z
        return out

    def right(self, m):
        """``M H^T`` for a ``(., p)`` matrix."""
        return np.asarray(m)[:, self.indices]

    def sandwich(self, m):
        """``H M H^T``."""
        m = np.asarray(m)
        return m[np.ix_(self.indices, self.indices)]

    def dense(self) -> np.ndarray:
        h = np.zeros((self.q, self.p))
        h[np.arange(self.q), self.indices] = 1.0
        return h

    def norm(self) -> float:
        return 1.0


class DenseOperator:
    """A general ``q x p`` linear observation operator."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.q, self.p = self.matrix.shape

    def apply(self, x):
        return np.asarray(x) @ self.matrix.T

    def adjoint(self, z):
        return np.asarray(z) @ self.matrix

    def right(self, m):
        return np.asarray(m) @ self.matrix.T

    def sandwich(self, m):
        return self.matrix @ np.asarray(m) @ self.matrix.T

    def dense(self) -> np.ndarray:
        return self.matrix

    def norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))


def as_operator(h):
    if isinstance(h, ObservationSystem):
        return h.h
    if isinstance(h, (SelectionOperator, DenseOperator)):
        return h
    return DenseOperator(h)


@dataclass
class ObservationSystem:
    h: SelectionOperator
    r: np.ndarray
    r_factor: SpdFactor

    @property
    def p(self) -> int:
        return self.h.p

    @property
    def q(self) -> int:
        return self.h.q

    @property
    def observed_indices(self) -> np.ndarray:
        return self.h.indices


@dataclass
class InnovationSet:
    perturbed: np.ndarray  # (n, q)
    mean: np.ndarray
    eps: np.ndarray  # the (n, q) observation perturbations that were drawn


def make_selection_system(p: int, observed_indices, r) -> ObservationSystem:
    """Build an observation system observing ``observed_indices`` (0-based)."""
    h = SelectionOperator(p, observed_indices)
    r = np.asarray(r, dtype=float)
    if r.shape != (h.q, h.q):
        raise DimensionMismatch(f"R must be {h.q}x{h.q}, got {r.shape}")
    return ObservationSystem(h, r, cholesky(r))


def make_circular_r(q: int, rho: float) -> np.ndarray:
    """``R_ij = rho ** min(|i-j|, q-|i-j|)``."""
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    idx = np.arange(q)
    d = np.abs(idx[:, None] - idx[None, :])
    r = float(rho) ** np.minimum(d, q - d).astype(float)
    cholesky(r)
    return r


def make_block_diag_r(blocks) -> np.ndarray:
    """Diagonal covariance from ``(block_size, variance)`` pairs."""
    diag = []
    for size, var in blocks:
        if var <= 0:
            raise ValueError("variances must be positive")
        diag.append(np.full(int(size), float(var)))
    return np.diag(np.concatenate(diag))


def observe_truth(x_true, sys: ObservationSystem, rng: RngStream) -> np.ndarray:
    """``y = H x + eps`` with ``eps ~ N(0, R)``."""
    x_true = np.asarray(x_true, dtype=float)
    if x_true.shape != (sys.p,):
        raise DimensionMismatch("state length does not match the observation system")
    z = rng.standard_normal(sys.q)
    return sys.h.apply(x_true) + sys.r_factor.lower @ z


def draw_obs_perturbations(n: int, sys: ObservationSystem, rng: RngStream, factor=None) -> np.ndarray:
    lower = (factor or sys.r_factor).lower
    return rng.standard_normal((n, sys.q)) @ lower.T


def perturbed_innovations(
    y, forecast: Ensemble, sys: ObservationSystem, rng: RngStream, eps=None
) -> InnovationSet:
    """Perturbed residuals ``d_j = y + eps_j - H x_j`` and their mean.

    ``eps`` may be passed to reuse previously drawn perturbations.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (sys.q,) or forecast.p != sys.p:
        raise DimensionMismatch("observation or ensemble dimension mismatch")
    if eps is None:
        eps = draw_obs_perturbations(forecast.n, sys, rng)
    d = y + eps - sys.h.apply(forecast.members)
    return InnovationSet(d, d.mean(axis=0), eps)


def random_indices(p: int, q: int, rng: RngStream) -> np.ndarray:
    """``q`` distinct sorted indices drawn uniformly from ``range(p)``."""
    return np.sort(rng.generator.choice(p, size=q, replace=False))
