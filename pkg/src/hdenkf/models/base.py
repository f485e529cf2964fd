from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import CflViolation, NonFiniteState
from ..numerics import RngStream, SpdFactor


def rk4_step(rhs: Callable, x, t: float, h_step: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of ``dx/dt = rhs(x, t)``."""
    if h_step <= 0:
        raise ValueError("step size must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = rhs(x, t)
        k2 = rhs(x + 0.5 * h_step * k1, t + 0.5 * h_step)
        k3 = rhs(x + 0.5 * h_step * k2, t + 0.5 * h_step)
        k4 = rhs(x + h_step * k3, t + h_step)
        out = x + h_step * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("RK4 step produced a non-finite state")
    return out


@dataclass
class ModelOperator:
    """A forecast model advancing states by one assimilation window.

    ``step`` performs one integration step on an array whose last axis is
    the state, so whole ensembles advance in a single call.  ``step_noise``
    is the factor of the additive noise covariance applied after every
    integration step when simulating the truth.
    """

    state_dim: int
    step: Callable[[np.ndarray], np.ndarray]
    steps_per_window: int = 1
    step_noise: SpdFactor | None = None
    descriptor: dict = field(default_factory=dict)

    def advance(self, x, t: int = 0, steps: int | None = None, rng: RngStream | None = None):
        """Integrate ``steps`` steps (one window by default) starting at step ``t``.

        With ``rng`` and a configured ``step_noise``, a fresh noise draw is
        added after each step (the truth-generation recipe).
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"state has length {x.shape[-1]}, model expects {self.state_dim}")
        steps = self.steps_per_window if steps is None else steps
        noisy = rng is not None and self.step_noise is not None
        for i in range(steps):
            try:
                x = self.step(x)
            except CflViolation as exc:
                raise CflViolation(str(exc), step=t + i) from None
            if noisy:
                x = x + rng.standard_normal(x.shape) @ self.step_noise.lower.T
        return x

    def window_noise(self, steps: int | None = None) -> np.ndarray | None:
        """Covariance of the accumulated per-step noise over ``steps`` steps."""
        if self.step_noise is None:
            return None
        steps = self.steps_per_window if steps is None else steps
        return steps * self.step_noise.matrix()


def make_linear_operator(m, noise: SpdFactor | None = None) -> ModelOperator:
    m = np.asarray(m, dtype=float)

    def step(x):
        out = x @ m.T
        if not np.all(np.isfinite(out)):
            raise NonFiniteState("linear model produced a non-finite state")
        return out

    return ModelOperator(m.shape[0], step, 1, noise, {"model": "linear", "p": m.shape[0]})
