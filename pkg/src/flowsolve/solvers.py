"""Fixed-grid integrators for the flow ODE and the inversion / reconstruction drivers.

All four schemes share one driver, :func:`integrate`. Reverse-time
integration is a decreasing grid, so each step's ``dt`` is negative and the
drift is never negated by hand.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from flowsolve.fields import CountingField, VelocityField, as_state, check_time, evaluate


class SolverKind(str, enum.Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"
    HEUN = "heun"
    FIREFLOW = "fireflow"


# NFE consumed by a run of N steps.
NFE_RULE = {
    SolverKind.EULER: lambda n: n,
    SolverKind.MIDPOINT: lambda n: 2 * n,
    SolverKind.HEUN: lambda n: 2 * n,
    SolverKind.FIREFLOW: lambda n: n + 1,
}


def expected_nfe(kind, n_steps: int) -> int:
    return NFE_RULE[SolverKind(kind)](n_steps)


def steps_for_nfe(kind, nfe: int) -> int:
    """Largest step count whose cost does not exceed ``nfe``."""
    kind = SolverKind(kind)
    if kind is SolverKind.EULER:
        return nfe
    if kind is SolverKind.FIREFLOW:
        return nfe - 1
    return nfe // 2


class DivergenceError(FloatingPointError):
    """A non-finite value appeared during integration.

    ``step`` is the index of the failing step and ``partial`` the trajectory
    up to the last finite state (``None`` when raised by a bare step call).
    """

    def __init__(self, message: str, step: int | None = None, partial: "Trajectory | None" = None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step
        self.partial = partial


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what}")
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Strictly monotone time points in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        for t in (pts[0], pts[-1]):
            check_time(t)
        d = np.diff(pts)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("grid must be strictly monotone")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, n: int, start: float = 0.0, end: float = 1.0) -> "TimeGrid":
        if n < 1:
            raise ValueError("need at least one step")
        return cls(np.linspace(start, end, n + 1))

    @classmethod
    def power(cls, n: int, gamma: float, reverse: bool = False) -> "TimeGrid":
        """Non-uniform grid ``t_i = (i/N)**gamma`` on [0, 1]."""
        if n < 1:
            raise ValueError("need at least one step")
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        g = cls((np.arange(n + 1) / n) ** gamma)
        return g.reversed() if reverse else g

    @classmethod
    def from_schedule(cls, schedule: str, n: int, reverse: bool = False) -> "TimeGrid":
        """``"uniform"`` or ``"power:<gamma>"``."""
        name, _, arg = schedule.partition(":")
        if name == "uniform":
            g = cls.uniform(n)
            return g.reversed() if reverse else g
        if name == "power":
            return cls.power(n, float(arg), reverse=reverse)
        raise ValueError(f"unknown schedule {schedule!r}")

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def forward(self) -> bool:
        return bool(self.points[-1] > self.points[0])

    @property
    def direction(self) -> str:
        return "forward" if self.forward else "reverse"

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def max_dt(self) -> float:
        return float(np.max(np.abs(self.dts)))

    def reversed(self) -> "TimeGrid":
        return TimeGrid(self.points[::-1].copy())

    def __len__(self):
        return self.points.size


@dataclass(frozen=True)
class SolverState:
    x: np.ndarray
    cached_mid_velocity: np.ndarray | None = None
    nfe: int = 0


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, ..., d)
    kind: SolverKind
    nfe_cum: list[int]
    mid_velocities: np.ndarray | None = None  # (N, ..., d) for midpoint-family solvers

    @property
    def nfe_total(self) -> int:
        return self.nfe_cum[-1]

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path=None) -> str:
        """Serialize a single (unbatched) trajectory as ``step,t,x_0..x_{d-1},nfe_cum``."""
        if self.states.ndim != 2:
            raise ValueError("only single trajectories serialize to CSV; index the batch first")
        d = self.states.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t"] + [f"x_{j}" for j in range(d)] + ["nfe_cum"])
        for i, (t, x) in enumerate(zip(self.times, self.states)):
            w.writerow([i, fmt(t)] + [fmt(v) for v in x] + [self.nfe_cum[i]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def select(self, idx) -> "Trajectory":
        """Trajectory of one sample (or a sub-batch) of a batched run."""
        mids = None if self.mid_velocities is None else self.mid_velocities[:, idx]
        return replace(self, states=self.states[:, idx], mid_velocities=mids)


def fmt(v) -> str:
    return "%.17g" % float(v)


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Inverse of :meth:`Trajectory.to_csv`: returns ``(times, states, nfe_cum)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    times = np.array([float(r[1]) for r in body])
    states = np.array([[float(v) for v in r[2:-1]] for r in body])
    return times, states, [int(r[-1]) for r in body]


def _check_step(t: float, dt: float) -> None:
    check_time(t)
    check_time(t + dt)


def step_euler(field: VelocityField, x, t: float, dt: float) -> np.ndarray:
    _check_step(t, dt)
    x = as_state(x, field.dim)
    return _finite(x + dt * evaluate(field, x, t), "state")


def step_midpoint(field: VelocityField, x, t: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Standard midpoint step (2 NFE); also returns the midpoint velocity."""
    _check_step(t, dt)
    x = as_state(x, field.dim)
    x_mid = _finite(x + 0.5 * dt * evaluate(field, x, t), "midpoint state")
    v_mid = evaluate(field, x_mid, t + 0.5 * dt)
    return _finite(x + dt * v_mid, "state"), v_mid


def step_heun(field: VelocityField, x, t: float, dt: float) -> np.ndarray:
    _check_step(t, dt)
    x = as_state(x, field.dim)
    v0 = evaluate(field, x, t)
    x_pred = _finite(x + dt * v0, "predictor state")
    v1 = evaluate(field, x_pred, t + dt)
    return _finite(x + 0.5 * dt * (v0 + v1), "state")


def step_fireflow(field: VelocityField, state: SolverState, t: float, dt: float) -> SolverState:
    """Midpoint step that takes its half-step velocity from the previous step's cache.

    With an empty cache this is a full midpoint step (2 NFE); afterwards the
    cached midpoint velocity stands in for ``v(x, t)`` and only the new
    midpoint is evaluated (1 NFE). The new midpoint velocity is cached.
    """
    if state.cached_mid_velocity is None:
        x, v_mid = step_midpoint(field, state.x, t, dt)
        return SolverState(x, v_mid, state.nfe + 2)
    _check_step(t, dt)
    x = as_state(state.x, field.dim)
    v_hat = state.cached_mid_velocity
    x_mid = _finite(x + 0.5 * dt * v_hat, "midpoint state")
    v_mid = evaluate(field, x_mid, t + 0.5 * dt)
    return SolverState(_finite(x + dt * v_mid, "state"), v_mid, state.nfe + 1)


def integrate(
    field: VelocityField,
    x0,
    grid: TimeGrid,
    kind=SolverKind.FIREFLOW,
    before_step: Callable[[int, float], None] | None = None,
) -> Trajectory:
    """Run ``kind`` over every interval of ``grid`` with signed ``dt_i = t_{i+1} - t_i``.

    ``x0`` may be a single state ``(d,)`` or a batch ``(B, d)``; one batched
    evaluation counts as one NFE. On a non-finite value a
    :class:`DivergenceError` carries the step index and the partial trajectory.
    """
    kind = SolverKind(kind)
    counter = CountingField(field)
    x = as_state(x0, field.dim)
    states = [x]
    mids: list[np.ndarray] = []
    nfe_cum = [0]
    state = SolverState(x)
    times = grid.points
    for i in range(grid.n_steps):
        t, dt = float(times[i]), float(times[i + 1] - times[i])
        if before_step is not None:
            before_step(i, t)
        try:
            if kind is SolverKind.EULER:
                x = step_euler(counter, x, t, dt)
            elif kind is SolverKind.HEUN:
                x = step_heun(counter, x, t, dt)
            elif kind is SolverKind.MIDPOINT:
                x, v_mid = step_midpoint(counter, x, t, dt)
                mids.append(v_mid)
            else:
                state = step_fireflow(counter, state, t, dt)
                x = state.x
                mids.append(state.cached_mid_velocity)
        except DivergenceError as exc:
            partial = Trajectory(times[: i + 1].copy(), np.stack(states), kind, nfe_cum,
                                 np.stack(mids) if mids else None)
            raise DivergenceError(str(exc), step=i, partial=partial) from exc
        states.append(x)
        nfe_cum.append(counter.nfe)
    if kind is SolverKind.FIREFLOW:
        assert state.nfe == counter.nfe
    return Trajectory(times.copy(), np.stack(states), kind, nfe_cum, np.stack(mids) if mids else None)


def replace_attention_values(step: int, t: float) -> None:
    """Hook where feature replacement from the inversion pass would happen.

    Intentionally a no-op: attention-feature injection for editing is not
    part of this package.
    """


def invert(field: VelocityField, x_data, grid: TimeGrid, kind=SolverKind.FIREFLOW) -> Trajectory:
    """Integrate from the data end of ``grid`` to its noise end, keeping every cached midpoint velocity."""
    return integrate(field, x_data, grid, kind)


def reconstruct(
    field: VelocityField,
    x_noise,
    grid: TimeGrid,
    kind=SolverKind.FIREFLOW,
    hook: Callable[[int, float], None] = replace_attention_values,
) -> Trajectory:
    """Integrate back from structured noise. Only the endpoint of an inversion is used; its cache is not."""
    first = {"done": False}

    def before(i, t):
        if not first["done"]:
            first["done"] = True
            hook(i, t)

    return integrate(field, x_noise, grid, kind, before_step=before)


def round_trip(field: VelocityField, x_data, grid: TimeGrid, kind=SolverKind.FIREFLOW) -> tuple[Trajectory, Trajectory]:
    """Invert along ``grid`` and reconstruct along its mirror."""
    inv = invert(field, x_data, grid, kind)
    rec = reconstruct(field, inv.final, grid.reversed(), kind)
    return inv, rec
