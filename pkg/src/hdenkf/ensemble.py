from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch


class Ensemble:
    """An ``(n, p)`` array of state vectors with a cached member mean."""

    __slots__ = ("members", "mean")

    def __init__(self, members):
        members = np.array(members, dtype=float, ndmin=2)
        if members.ndim != 2:
            raise DimensionMismatch("ensemble members must form an (n, p) array")
        self.members = members
        self.mean = members.mean(axis=0)

    @property
    def n(self) -> int:
        return self.members.shape[0]

    @property
    def p(self) -> int:
        return self.members.shape[1]

    def anomalies(self, center=None) -> np.ndarray:
        """Members minus ``center`` (the ensemble mean by default)."""
        c = self.mean if center is None else np.asarray(center, dtype=float)
        return self.members - c

    def __repr__(self):
        return f"Ensemble(n={self.n}, p={self.p})"
