"""Barotropic shallow water model in a periodic channel.

The domain is periodic in ``z1`` (columns, last array axis) and bounded by
free-slip rigid walls in ``z2`` (rows).  Rows ``0`` and ``ny - 1`` lie on
the walls: after every step ``v`` is zeroed there and ``u``, ``h`` are
copied from the adjacent interior row.

Time stepping is the two-step Lax-Wendroff scheme applied to the flux form
in ``(h, hu, hv)``: provisional half-step values are formed at the x- and
y-face midpoints, then the full step differences the midpoint fluxes.
Coriolis and diffusion terms are added at the full step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import CflViolation, DimensionMismatch, NonFiniteState
from .base import ModelOperator


@dataclass(frozen=True)
class SweParams:
    nx: int = 50
    ny: int = 31
    dx: float = 10e3
    dy: float = 10e3
    dt: float = 30.0
    g: float = 9.8
    f_cor: float = 1e-4
    k_diff: float = 5e4
    L: float = 500e3
    D: float = 300e3
    H0: float = 50.0
    H1: float = 5.5
    H2: float = 3.325
    steps_per_window: int = 360

    @property
    def p(self) -> int:
        return 3 * self.nx * self.ny

    def with_(self, **kw) -> "SweParams":
        return replace(self, **kw)


@dataclass
class SweState:
    u: np.ndarray
    v: np.ndarray
    h: np.ndarray


def swe_initial_height(params: SweParams) -> np.ndarray:
    z1 = np.arange(params.nx) * params.dx
    z2 = np.arange(params.ny) * params.dy
    Z1, Z2 = np.meshgrid(z1, z2)
    D, L = params.D, params.L
    arg = 9.0 * (D / 2 - Z2)
    return (
        params.H0
        + params.H1 * np.tanh(arg / (2.0 * D))
        + params.H2 / np.cosh(arg / D) ** 2 * np.sin(2.0 * np.pi * Z1 / L)
    )


def geostrophic_winds(h, params: SweParams):
    """``u = -(g/f) dh/dz2``, ``v = (g/f) dh/dz1`` by centered differences."""
    c = params.g / params.f_cor
    dhdz1 = (np.roll(h, -1, axis=-1) - np.roll(h, 1, axis=-1)) / (2 * params.dx)
    dhdz2 = np.gradient(h, params.dy, axis=-2, edge_order=1)
    return -c * dhdz2, c * dhdz1


def swe_init(params: SweParams, h=None) -> SweState:
    """Balanced initial state; ``h`` overrides the analytic height field."""
    h = swe_initial_height(params) if h is None else np.asarray(h, dtype=float)
    u, v = geostrophic_winds(h, params)
    return SweState(u, v, h.copy())


def _xpad(a):
    return np.concatenate([a[..., -1:], a, a[..., :1]], axis=-1)


def _laplacian(a, dx, dy):
    """Five-point Laplacian at interior rows, shape ``(..., ny-2, nx)``."""
    ax = _xpad(a)[..., 1:-1, :]
    lx = (ax[..., 2:] - 2.0 * ax[..., 1:-1] + ax[..., :-2]) / dx**2
    ly = (a[..., 2:, :] - 2.0 * a[..., 1:-1, :] + a[..., :-2, :]) / dy**2
    return lx + ly


def cfl_number(u, v, h, params: SweParams) -> float:
    speed = np.sqrt(params.g * np.max(h)) + max(np.max(np.abs(u)), np.max(np.abs(v)))
    return params.dt * speed / min(params.dx, params.dy)


def swe_step_arrays(u, v, h, params: SweParams):
    """Advance ``(u, v, h)`` arrays of shape ``(..., ny, nx)`` by one step."""
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NonFiniteState("non-finite shallow water state")
    if np.min(h) <= 0:
        raise NonFiniteState("non-positive fluid depth")
    cfl = cfl_number(u, v, h, params)
    if not cfl < 1.0:
        raise CflViolation(f"CFL number {cfl:.3f} >= 1")

    g, dt, dx, dy = params.g, params.dt, params.dx, params.dy
    uh = u * h
    vh = v * h

    # half step at x-face midpoints (interior rows only)
    hx, uhx, vhx = (_xpad(a)[..., 1:-1, :] for a in (h, uh, vh))
    ux = uhx / hx
    vx = vhx / hx
    Fh = uhx
    Fu = uhx * ux + 0.5 * g * hx**2
    Fv = uhx * vx
    c = 0.5 * dt / dx
    h_mx = 0.5 * (hx[..., 1:] + hx[..., :-1]) - c * (Fh[..., 1:] - Fh[..., :-1])
    uh_mx = 0.5 * (uhx[..., 1:] + uhx[..., :-1]) - c * (Fu[..., 1:] - Fu[..., :-1])
    vh_mx = 0.5 * (vhx[..., 1:] + vhx[..., :-1]) - c * (Fv[..., 1:] - Fv[..., :-1])

    # half step at y-face midpoints
    Gh = vh
    Gu = uh * v
    Gv = vh * v + 0.5 * g * h**2
    c = 0.5 * dt / dy
    h_my = 0.5 * (h[..., 1:, :] + h[..., :-1, :]) - c * (Gh[..., 1:, :] - Gh[..., :-1, :])
    uh_my = 0.5 * (uh[..., 1:, :] + uh[..., :-1, :]) - c * (Gu[..., 1:, :] - Gu[..., :-1, :])
    vh_my = 0.5 * (vh[..., 1:, :] + vh[..., :-1, :]) - c * (Gv[..., 1:, :] - Gv[..., :-1, :])

    # full step fluxes from the midpoint values
    Fh = uh_mx
    Fu = uh_mx**2 / h_mx + 0.5 * g * h_mx**2
    Fv = uh_mx * vh_mx / h_mx
    Gh = vh_my
    Gu = uh_my * vh_my / h_my
    Gv = vh_my**2 / h_my + 0.5 * g * h_my**2

    def div(F, G):
        return (dt / dx) * (F[..., 1:] - F[..., :-1]) + (dt / dy) * (G[..., 1:, :] - G[..., :-1, :])

    inner = (Ellipsis, slice(1, -1), slice(None))
    h_in = h[inner]
    h_new = h_in - div(Fh, Gh)
    h_bar = 0.5 * (h_in + h_new)
    uh_new = uh[inner] - div(Fu, Gu) + dt * params.f_cor * v[inner] * h_bar
    vh_new = vh[inner] - div(Fv, Gv) - dt * params.f_cor * u[inner] * h_bar

    u_in = uh_new / h_new
    v_in = vh_new / h_new
    if params.k_diff:
        kdt = params.k_diff * dt
        u_in = u_in + kdt * _laplacian(u, dx, dy)
        v_in = v_in + kdt * _laplacian(v, dx, dy)
        h_new = h_new + kdt * _laplacian(h, dx, dy)

    u_out = np.empty_like(u)
    v_out = np.empty_like(v)
    h_out = np.empty_like(h)
    u_out[inner] = u_in
    v_out[inner] = v_in
    h_out[inner] = h_new
    for wall, inside in ((0, 1), (-1, -2)):
        u_out[..., wall, :] = u_out[..., inside, :]
        h_out[..., wall, :] = h_out[..., inside, :]
        v_out[..., wall, :] = 0.0
    return u_out, v_out, h_out


def swe_step(state: SweState, params: SweParams) -> SweState:
    return SweState(*swe_step_arrays(state.u, state.v, state.h, params))


def swe_flatten(state: SweState) -> np.ndarray:
    """Stack ``u``, ``v``, ``h`` blocks, each row-major, along the last axis."""
    lead = state.h.shape[:-2]
    return np.concatenate(
        [a.reshape(lead + (-1,)) for a in (state.u, state.v, state.h)], axis=-1
    )


def swe_unflatten(x, params: SweParams) -> SweState:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.p:
        raise DimensionMismatch(f"expected state length {params.p}, got {x.shape[-1]}")
    fields = x.reshape(x.shape[:-1] + (3, params.ny, params.nx))
    return SweState(fields[..., 0, :, :].copy(), fields[..., 1, :, :].copy(), fields[..., 2, :, :].copy())


def make_swe_operator(params: SweParams) -> ModelOperator:
    """Flattened-state operator advancing ``params.steps_per_window`` steps."""
    shape = (3, params.ny, params.nx)

    def step(x):
        f = x.reshape(x.shape[:-1] + shape)
        u, v, h = swe_step_arrays(f[..., 0, :, :], f[..., 1, :, :], f[..., 2, :, :], params)
        return np.stack([u, v, h], axis=-3).reshape(x.shape)

    desc = {
        "model": "swe",
        "nx": params.nx,
        "ny": params.ny,
        "dx": params.dx,
        "dt": params.dt,
        "k_diff": params.k_diff,
    }
    return ModelOperator(params.p, step, params.steps_per_window, None, desc)
