"""Velocity fields: the abstract drift interface, analytic reference fields and their exact flows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

# Slack for grid points that land a rounding error outside [0, 1].
TIME_EPS = 1e-12
MAX_TIME_DEGREE = 4


def as_state(x, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 array whose last axis is the state dimension.

    A scalar becomes a 1-vector. Raises ``ValueError`` on a dimension mismatch
    or non-finite component.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if dim is not None and arr.shape[-1] != dim:
        raise ValueError(f"state has dimension {arr.shape[-1]}, field expects {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("state contains non-finite components")
    return arr


def check_time(t: float) -> float:
    t = float(t)
    if not (-TIME_EPS <= t <= 1.0 + TIME_EPS):
        raise ValueError(f"time {t!r} outside [0, 1]")
    return t


class VelocityField:
    """Drift ``v(x, t)`` of the flow ODE ``dx/dt = v(x, t)``.

    Subclasses implement :meth:`velocity` on arrays of shape ``(..., dim)``;
    callers go through :func:`evaluate` (or ``field(x, t)``), which validates
    the inputs. One evaluation on a batch is one function evaluation (NFE),
    exactly like one forward pass of a network on a batch.
    """

    dim: int = 1
    lipschitz: float | None = None

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, t):
        return evaluate(self, x, t)


def evaluate(field: VelocityField, x, t: float) -> np.ndarray:
    x = as_state(x, field.dim)
    t = check_time(t)
    return np.asarray(field.velocity(x, t), dtype=np.float64)


class CountingField(VelocityField):
    """Wraps a field and counts evaluations; the count is owned by whoever made the wrapper."""

    def __init__(self, inner: VelocityField):
        self.inner = inner
        self.dim = inner.dim
        self.lipschitz = inner.lipschitz
        self.nfe = 0

    def velocity(self, x, t):
        self.nfe += 1
        return self.inner.velocity(x, t)


@dataclass(frozen=True)
class AnalyticField(VelocityField):
    """A drift with a closed-form flow.

    ``kind`` is ``"constant"`` (v = c), ``"linear"`` (v = a x) or ``"time"``
    (v = p(t), with ``coeffs`` in increasing-degree order, applied to every
    component).
    """

    kind: str
    dim: int = 1
    c: tuple = ()
    a: float = 0.0
    coeffs: tuple = ()
    name: str = dc_field(default="", compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind == "constant":
            if len(self.c) != self.dim:
                raise ValueError("constant drift length must equal dim")
            if not all(math.isfinite(v) for v in self.c):
                raise ValueError("constant drift must be finite")
        elif self.kind == "linear":
            if not math.isfinite(self.a):
                raise ValueError("rate must be finite")
        elif self.kind == "time":
            if not 1 <= len(self.coeffs) <= MAX_TIME_DEGREE + 1:
                raise ValueError(f"time polynomial degree must be <= {MAX_TIME_DEGREE}")
        else:
            raise ValueError(f"unknown analytic field kind {self.kind!r}")

    @property
    def lipschitz(self) -> float:
        return abs(self.a) if self.kind == "linear" else 0.0

    def velocity(self, x, t):
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.c, dtype=np.float64), x.shape).copy()
        if self.kind == "linear":
            return self.a * x
        p = np.polynomial.polynomial.polyval(t, self.coeffs)
        return np.full(x.shape, p)

    def describe(self) -> str:
        if self.name:
            return self.name
        if self.kind == "constant":
            return "constant:" + ",".join(repr(float(v)) for v in self.c)
        if self.kind == "linear":
            return f"linear:{self.a!r}"
        return "time:" + ",".join(repr(float(v)) for v in self.coeffs)


def constant(c) -> AnalyticField:
    c = tuple(float(v) for v in np.atleast_1d(c))
    return AnalyticField("constant", dim=len(c), c=c)


def linear_scalar(a: float, dim: int = 1) -> AnalyticField:
    return AnalyticField("linear", dim=dim, a=float(a))


def time_only(coeffs, dim: int = 1) -> AnalyticField:
    return AnalyticField("time", dim=dim, coeffs=tuple(float(v) for v in coeffs))


def exact_solution(field: AnalyticField, x0, t0: float, t1: float) -> np.ndarray:
    """Flow map of an analytic field from ``t0`` to ``t1`` (either direction)."""
    if not isinstance(field, AnalyticField):
        raise TypeError("exact_solution needs an AnalyticField")
    x0 = as_state(x0, field.dim)
    t0, t1 = check_time(t0), check_time(t1)
    if field.kind == "constant":
        return x0 + np.asarray(field.c) * (t1 - t0)
    if field.kind == "linear":
        return x0 * math.exp(field.a * (t1 - t0))
    antideriv = np.polynomial.polynomial.polyint(field.coeffs)
    P = np.polynomial.polynomial.polyval
    return x0 + (P(t1, antideriv) - P(t0, antideriv))


_KINDS = {"constant": "constant", "const": "constant", "linear": "linear", "time": "time", "timeonly": "time"}


def parse_field(spec: str) -> AnalyticField:
    """Build an analytic field from ``NAME:p1,p2,...[;dim=D]``.

    ``constant:1,-2`` gives v = (1, -2); ``linear:-1`` gives v = -x;
    ``time:0,2`` gives v = 2t. ``dim`` applies to linear and time fields.
    """
    body, _, opts = spec.partition(";")
    name, _, params = body.partition(":")
    kind = _KINDS.get(name.strip().lower())
    if kind is None:
        raise ValueError(f"unknown field {name!r}; expected one of constant, linear, time")
    try:
        values = [float(p) for p in params.split(",") if p.strip()]
    except ValueError as exc:
        raise ValueError(f"bad field parameters in {spec!r}") from exc
    dim = 1
    for opt in filter(None, (o.strip() for o in opts.split(";"))):
        key, _, val = opt.partition("=")
        if key.strip() != "dim":
            raise ValueError(f"unknown field option {key!r}")
        dim = int(val)
    if not values:
        raise ValueError(f"field {spec!r} has no parameters")
    if kind == "constant":
        f = constant(values)
    elif kind == "linear":
        if len(values) != 1:
            raise ValueError("linear field takes exactly one rate")
        f = linear_scalar(values[0], dim=dim)
    else:
        f = time_only(values, dim=dim)
    return AnalyticField(f.kind, f.dim, f.c, f.a, f.coeffs, name=spec)
