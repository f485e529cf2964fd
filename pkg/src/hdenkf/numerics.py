"""Dense linear algebra helpers and seeded Gaussian sampling.

All randomness in the package flows through :class:`RngStream`, a thin
wrapper around a PCG64 generator keyed by ``(seed, stream_id)``.  Normal
variates come from numpy's ziggurat sampler, which is fixed across
platforms, so a given key always yields the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .ensemble import Ensemble
from .errors import DimensionMismatch, NotPositiveDefinite

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` with ``A = L @ L.T``."""

    lower: np.ndarray

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


@dataclass
class RngStream:
    """Independent random stream identified by ``(seed, stream_id)``.

    ``stream_id`` is a tuple of non-negative integers; :meth:`child`
    appends to it, so sub-streams never collide with their parent.
    """

    seed: int
    stream_id: tuple = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.stream_id = tuple(int(s) for s in self.stream_id)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(ids))

    def standard_normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)


def cholesky(a) -> SpdFactor:
    """Factor a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If ``a`` is not symmetric or any pivot (``L[i, i]**2``) is at or
        below ``1e-12``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.min(np.diag(lower)) ** 2 <= PIVOT_TOL:
        raise NotPositiveDefinite("pivot below 1e-12")
    return SpdFactor(lower)


def solve_spd(factor: SpdFactor, b) -> np.ndarray:
    """Solve ``A X = b`` given the Cholesky factor of ``A``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dimension:
        raise DimensionMismatch(
            f"factor has dimension {factor.dimension}, right-hand side has {b.shape[0]} rows"
        )
    return sla.cho_solve((factor.lower, True), b, check_finite=False)


def sample_gaussian(mean, cov_factor: SpdFactor, n: int, rng: RngStream) -> Ensemble:
    """Draw ``n`` members ``mean + L z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (cov_factor.dimension,):
        raise DimensionMismatch("mean length does not match factor dimension")
    if n < 1:
        raise ValueError("n must be at least 1")
    z = rng.standard_normal((n, mean.size))
    return Ensemble(mean + z @ cov_factor.lower.T)


def spectral_norm(a) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return float(np.linalg.norm(a, 2))


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)
