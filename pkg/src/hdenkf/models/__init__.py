from .base import ModelOperator, make_linear_operator, rk4_step
from .lorenz96 import L96Params, l96_initial_state, l96_rhs, make_l96_operator
from .shallow_water import (
    SweParams,
    SweState,
    make_swe_operator,
    swe_flatten,
    swe_init,
    swe_step,
    swe_unflatten,
)

__all__ = [
    "ModelOperator",
    "make_linear_operator",
    "rk4_step",
    "L96Params",
    "l96_initial_state",
    "l96_rhs",
    "make_l96_operator",
    "SweParams",
    "SweState",
    "make_swe_operator",
    "swe_flatten",
    "swe_init",
    "swe_step",
    "swe_unflatten",
]
