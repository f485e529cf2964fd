from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionTooSmall
from ..numerics import SpdFactor
from .base import ModelOperator, rk4_step


@dataclass(frozen=True)
class L96Params:
    p: int = 40
    F: float = 8.0
    dt: float = 0.05
    steps_per_window: int = 4
    sigma0: float = 0.0  # std of the additive noise per integration step

    def __post_init__(self):
        if self.p < 4:
            raise DimensionTooSmall("Lorenz-96 needs p >= 4")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def l96_rhs(x, F: float) -> np.ndarray:
    """``(x[j+1] - x[j-2]) * x[j-1] - x[j] + F`` with cyclic indices."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise DimensionTooSmall("Lorenz-96 needs at least 4 variables")
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


def make_l96_operator(params: L96Params) -> ModelOperator:
    F, dt = params.F, params.dt

    def rhs(x, t):
        return l96_rhs(x, F)

    def step(x):
        return rk4_step(rhs, x, 0.0, dt)

    noise = None
    if params.sigma0 > 0:
        noise = SpdFactor(params.sigma0 * np.eye(params.p))
    return ModelOperator(
        params.p,
        step,
        params.steps_per_window,
        noise,
        {"model": "l96", "p": params.p, "F": F, "dt": dt, "sigma0": params.sigma0},
    )


def l96_initial_state(p: int, F: float, bump_index: int = 19, bump: float = 0.001) -> np.ndarray:
    """Equilibrium ``x = F`` with one component nudged (the 20th by default)."""
    x = np.full(p, float(F))
    x[bump_index % p] += bump
    return x
