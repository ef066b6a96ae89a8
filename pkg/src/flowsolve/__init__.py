"""Cached-midpoint ODE solvers for rectified flows, with a small 2D training pipeline."""

from flowsolve.fields import (
    AnalyticField,
    CountingField,
    VelocityField,
    constant,
    evaluate,
    exact_solution,
    linear_scalar,
    parse_field,
    time_only,
)
from flowsolve.solvers import (
    DivergenceError,
    SolverKind,
    SolverState,
    TimeGrid,
    Trajectory,
    integrate,
    invert,
    reconstruct,
    round_trip,
    step_euler,
    step_fireflow,
    step_heun,
    step_midpoint,
)

__version__ = "0.1.0"
