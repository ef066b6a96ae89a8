"""Error measurements: convergence order, velocity-reuse error, perturbation growth,
round-trip reconstruction error, trajectory straightness and energy distance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from flowsolve.fields import AnalyticField, VelocityField, as_state, exact_solution
from flowsolve.solvers import (
    DivergenceError,
    SolverKind,
    TimeGrid,
    Trajectory,
    fmt,
    integrate,
    invert,
    reconstruct,
)

NOISE_FLOOR = 1e-13
# Relative slack on the perturbation bound: the N=512 midpoint reference is
# itself only accurate to ~dt^2/6 ~ 6e-7 relative.
PERTURB_RTOL = 1e-4


@dataclass
class ErrorSeries:
    dts: list[float]
    errors: list[float]
    kind: str = ""
    field_id: str = ""
    steps: list[int] = field(default_factory=list)
    nfe: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.dts) != len(self.errors):
            raise ValueError("one error per step size")
        if any(b >= a for a, b in zip(self.dts, self.dts[1:])):
            raise ValueError("step sizes must be strictly decreasing")
        if any(not math.isfinite(e) or e < 0 for e in self.errors):
            raise ValueError("errors must be finite and non-negative")


@dataclass
class OrderEstimate:
    slope: float
    intercept: float
    r_squared: float
    degenerate: bool
    n_points: int


def fit_loglog(x, y) -> tuple[float, float, float]:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), max(0.0, min(1.0, r2))


def estimate_order(series: ErrorSeries, min_points: int = 4) -> OrderEstimate:
    """Least-squares slope of log(error) against log(dt).

    Points at or below the 1e-13 noise floor are dropped and mark the estimate
    degenerate; the slope is NaN when too few points survive.
    """
    keep = [(d, e) for d, e in zip(series.dts, series.errors) if e > NOISE_FLOOR]
    degenerate = len(keep) < len(series.errors)
    if len(series.errors) < min_points:
        raise ValueError(f"need at least {min_points} points")
    if len(keep) < 2:
        return OrderEstimate(math.nan, math.nan, math.nan, True, len(keep))
    slope, intercept, r2 = fit_loglog(*zip(*keep))
    return OrderEstimate(slope, intercept, r2, degenerate, len(keep))


def convergence_series(field: AnalyticField, x0, kind, ladder=(4, 8, 16, 32, 64, 128),
                       t0: float = 0.0, t1: float = 1.0, schedule: str = "uniform") -> ErrorSeries:
    """Global endpoint error against the closed-form flow, one entry per N in ``ladder``."""
    x0 = as_state(x0, field.dim)
    exact = exact_solution(field, x0, t0, t1)
    dts, errs, nfes = [], [], []
    for n in ladder:
        grid = _grid(schedule, n, t0, t1)
        traj = integrate(field, x0, grid, kind)
        dts.append(grid.max_dt)
        errs.append(float(np.linalg.norm(traj.final - exact)))
        nfes.append(traj.nfe_total)
    return ErrorSeries(dts, errs, SolverKind(kind).value, _field_id(field), list(ladder), nfes)


def _grid(schedule: str, n: int, t0: float, t1: float) -> TimeGrid:
    if schedule == "uniform":
        return TimeGrid.uniform(n, t0, t1)
    if (t0, t1) not in ((0.0, 1.0), (1.0, 0.0)):
        raise ValueError("non-uniform schedules span the full unit interval")
    return TimeGrid.from_schedule(schedule, n, reverse=t1 < t0)


def _field_id(field) -> str:
    describe = getattr(field, "describe", None)
    return describe() if describe else type(field).__name__


@dataclass
class ReuseError:
    """Per-step ``||v_hat - v||`` along a FireFlow run (steps 1..N-1; step 0 has no cache)."""

    steps: list[int]
    times: list[float]
    dts: list[float]
    mean: list[float]
    std: list[float]

    @property
    def max_error(self) -> float:
        return max(self.mean) if self.mean else 0.0

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.mean)) if self.mean else 0.0


def velocity_reuse_error(field: VelocityField, x0, grid: TimeGrid) -> ReuseError:
    """Compare each cached midpoint velocity with a fresh ``v(x_i, t_i)``.

    The fresh evaluations go to ``field`` directly, outside the run's NFE count.
    """
    traj = integrate(field, x0, grid, SolverKind.FIREFLOW)
    steps, times, dts, mean, std = [], [], [], [], []
    for i in range(1, grid.n_steps):
        t = float(grid.points[i])
        diff = traj.mid_velocities[i - 1] - field(traj.states[i], t)
        norms = np.atleast_1d(np.linalg.norm(diff, axis=-1))
        steps.append(i)
        times.append(t)
        dts.append(float(abs(grid.dts[i])))
        mean.append(float(norms.mean()))
        std.append(float(norms.std()))
    return ReuseError(steps, times, dts, mean, std)


@dataclass
class PerturbationReport:
    delta_T: float
    delta_0: float
    lipschitz: float
    T: float
    bound: float
    satisfied: bool

    @property
    def ratio(self) -> float:
        return self.delta_0 / self.delta_T


def perturbation_propagation(field: AnalyticField, x_T, delta_T, grid: TimeGrid | None = None,
                             kind=SolverKind.MIDPOINT) -> PerturbationReport:
    """Push ``x_T`` and ``x_T + delta_T`` backward over ``grid`` and compare the gap with ``exp(-L T) ||delta_T||``.

    The default grid is a 512-step midpoint reference from t=1 to t=0. A
    violation is reported through ``satisfied``, never raised.
    """
    if grid is None:
        grid = TimeGrid.uniform(512).reversed()
    if grid.forward:
        raise ValueError("perturbations propagate backward; pass a decreasing grid")
    L = field.lipschitz
    if L is None:
        raise ValueError("field has no known Lipschitz constant")
    x_T = as_state(x_T, field.dim)
    delta_T = np.broadcast_to(as_state(delta_T), x_T.shape)
    a = integrate(field, x_T, grid, kind).final
    b = integrate(field, x_T + delta_T, grid, kind).final
    d0 = float(np.linalg.norm(b - a))
    dT = float(np.linalg.norm(delta_T))
    T = float(abs(grid.points[-1] - grid.points[0]))
    bound = math.exp(-L * T) * dT
    return PerturbationReport(dT, d0, float(L), T, bound, d0 <= bound * (1 + PERTURB_RTOL))


@dataclass
class ReconstructionReport:
    kind: str
    n_steps: int
    nfe: int
    errors: np.ndarray  # NaN where a sample diverged
    diverged: list[int]

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.errors))

    def percentile(self, q: float) -> float:
        return float(np.nanpercentile(self.errors, q))


def reconstruction_error(field: VelocityField, samples, n_steps: int, kind=SolverKind.FIREFLOW,
                         schedule: str = "uniform") -> ReconstructionReport:
    """Invert data samples (at t=1) to t=0 with ``n_steps`` steps, reconstruct with as many, measure L2 error.

    Reconstruction gets only the inverted endpoint. Samples that diverge are
    reported by index and excluded from the statistics.
    """
    kind = SolverKind(kind)
    x = as_state(samples, field.dim)
    x = x.reshape(-1, field.dim)
    inv_grid = TimeGrid.from_schedule(schedule, n_steps, reverse=True)
    try:
        inv = invert(field, x, inv_grid, kind)
        rec = reconstruct(field, inv.final, inv_grid.reversed(), kind)
        errors = np.linalg.norm(rec.final - x, axis=1)
        nfe = inv.nfe_total + rec.nfe_total
        diverged = []
    except DivergenceError:
        errors = np.full(len(x), np.nan)
        diverged = []
        nfe = 0
        for j, xj in enumerate(x):
            try:
                inv = invert(field, xj, inv_grid, kind)
                rec = reconstruct(field, inv.final, inv_grid.reversed(), kind)
            except DivergenceError:
                diverged.append(j)
                continue
            errors[j] = np.linalg.norm(rec.final - xj)
            nfe = inv.nfe_total + rec.nfe_total
    return ReconstructionReport(kind.value, n_steps, nfe, errors, diverged)


def straightness(states) -> float | np.ndarray:
    """Largest distance of an interior state from the start-end chord, over chord length.

    ``states`` is ``(T, d)`` or ``(T, B, d)`` (or a :class:`Trajectory`).
    Returns NaN where the chord has zero length.
    """
    if isinstance(states, Trajectory):
        states = states.states
    s = np.asarray(states, dtype=np.float64)
    if s.shape[0] < 3:
        raise ValueError("straightness needs at least three states")
    single = s.ndim == 2
    if single:
        s = s[:, None, :]
    start, end = s[0], s[-1]
    chord = end - start
    length = np.linalg.norm(chord, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = chord / length[:, None]
        rel = s[1:-1] - start
        perp = rel - np.sum(rel * u, axis=-1, keepdims=True) * u
        out = np.linalg.norm(perp, axis=-1).max(axis=0) / length
    out = np.where(length > 0, out, np.nan)
    return float(out[0]) if single else out


def velocity_variation(field: VelocityField, x0, grid: TimeGrid) -> float:
    """Mean over steps and samples of ``||v(x_{i+1}, t_{i+1}) - v(x_i, t_i)||`` along midpoint paths."""
    traj = integrate(field, x0, grid, SolverKind.MIDPOINT)
    vs = [field(traj.states[i], float(grid.points[i])) for i in range(len(grid))]
    diffs = [np.linalg.norm(b - a, axis=-1) for a, b in zip(vs, vs[1:])]
    return float(np.mean(diffs))


def energy_distance(a, b) -> float:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` over all pairs (V-statistic, so ``energy_distance(A, A) == 0``)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples differ in dimension")
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return float(max(2.0 * ab - aa - bb, 0.0))


def csv_block(header: list[str], rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v))
                            for v in row))
    return "\n".join(out) + "\n"


def json_summary(obj) -> str:
    if hasattr(obj, "__dataclass_fields__"):
        obj = {k: v for k, v in asdict(obj).items() if not isinstance(v, np.ndarray)}
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(type(v))
