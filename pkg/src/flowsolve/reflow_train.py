"""Synthetic 2D data, the flow-matching regression loop and reflow re-coupling."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from flowsolve.solvers import SolverKind, TimeGrid, fmt, integrate
from flowsolve.tinynet import MLPField, MLPParams, OptState, adam_step, forward, gradient, init_mlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    weights: tuple
    means: tuple
    covs: tuple
    role: str = "source"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if len(self.means) != w.size or len(self.covs) != w.size:
            raise ValueError("one mean and covariance per component")
        d = len(self.means[0])
        for mu, cov in zip(self.means, self.covs):
            cov = np.asarray(cov, dtype=np.float64)
            if len(mu) != d or cov.shape != (d, d):
                raise ValueError("component shapes disagree")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError("covariance must be positive definite")
        if self.role not in ("source", "target"):
            raise ValueError("role is 'source' or 'target'")

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @classmethod
    def isotropic(cls, means, scale: float = 1.0, weights=None, role: str = "source") -> "GaussianMixtureSpec":
        k = len(means)
        w = tuple([1.0 / k] * k) if weights is None else tuple(weights)
        d = len(means[0])
        cov = tuple(tuple(row) for row in (scale**2 * np.eye(d)).tolist())
        return cls(w, tuple(tuple(float(v) for v in m) for m in means), tuple([cov] * k), role)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        z = rng.standard_normal((n, self.dim))
        means = np.asarray(self.means)
        chols = np.stack([np.linalg.cholesky(np.asarray(c)) for c in self.covs])
        return means[comp] + np.einsum("nij,nj->ni", chols[comp], z)

    def component_of(self, x: np.ndarray) -> np.ndarray:
        """Index of the nearest component mean for each row of ``x``."""
        means = np.asarray(self.means)
        return np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)


def default_source() -> GaussianMixtureSpec:
    return GaussianMixtureSpec.isotropic([(-8.0, -3.0), (-8.0, 3.0)], role="source")


def default_target() -> GaussianMixtureSpec:
    return GaussianMixtureSpec.isotropic([(8.0, -4.0), (8.0, 0.0), (8.0, 4.0)], role="target")


def sample_mixture(spec: GaussianMixtureSpec, n: int, seed: int) -> np.ndarray:
    return spec.sample(n, np.random.default_rng(seed))


def interpolate(x0, x1, t):
    """Straight-line interpolant ``t x1 + (1 - t) x0``; exact at both ends."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("endpoint shapes differ")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t outside [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * x1 + (1.0 - t) * x0


@dataclass
class IndependentCoupling:
    """Fresh independent draws ``X0 ~ source``, ``X1 ~ target`` per batch."""

    source: GaussianMixtureSpec
    target: GaussianMixtureSpec

    provenance = "independent"

    def draw(self, rng: np.random.Generator, n: int):
        return self.source.sample(n, rng), self.target.sample(n, rng)


@dataclass
class Coupling:
    x0: np.ndarray
    x1: np.ndarray
    provenance: str = "independent"

    def __post_init__(self):
        if self.x0.shape != self.x1.shape or self.x0.ndim != 2 or len(self.x0) == 0:
            raise ValueError("coupling needs matching, nonempty (n, d) arrays")

    def __len__(self):
        return len(self.x0)

    def draw(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.x0), size=n)
        return self.x0[idx], self.x1[idx]

    def to_csv(self, path=None) -> str:
        d = self.x0.shape[1]
        lines = [",".join([f"x0_{j}" for j in range(d)] + [f"x1_{j}" for j in range(d)])]
        for a, b in zip(self.x0, self.x1):
            lines.append(",".join(fmt(v) for v in (*a, *b)))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, provenance: str = "independent") -> "Coupling":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        d = data.shape[1] // 2
        return cls(data[:, :d], data[:, d:], provenance)


def flow_matching_loss(params: MLPParams, x0, x1, t) -> float:
    """Mean over the batch of ``||(x1 - x0) - v(x_t, t)||^2``."""
    xt = interpolate(x0, x1, t)
    resid = (np.asarray(x1) - np.asarray(x0)) - forward(params, xt, t)
    return float(np.mean(np.sum(resid * resid, axis=-1)))


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 3000
    lr: float = 3e-3
    seed: int = 1024
    hidden: tuple = (64, 64, 64)
    # cosine decay down to lr * final_lr_frac
    final_lr_frac: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1 or self.lr <= 0:
            raise ValueError("batch_size, iterations and lr must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainResult:
    params: MLPParams
    losses: np.ndarray
    config: TrainConfig = field(repr=False, default=None)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("iter,loss\n")
            for i, v in enumerate(self.losses):
                fh.write(f"{i},{fmt(v)}\n")


def train_rectified_flow(config: TrainConfig, coupling, init: MLPParams | None = None) -> TrainResult:
    """Regress ``v(x_t, t)`` onto ``x1 - x0`` with ``t ~ U[0, 1]`` per sample.

    ``coupling`` is anything with ``draw(rng, n) -> (x0, x1)``: an
    :class:`IndependentCoupling` for 1-rectified training or a fixed
    :class:`Coupling` for reflow. Deterministic for a fixed config.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    if init is None:
        x0, _ = coupling.draw(np.random.default_rng(seeds[1]), 1)
        params = init_mlp(x0.shape[1], config.hidden, seed=int(seeds[1].generate_state(1)[0]))
    else:
        params = init.copy()
    opt = OptState.create(params, lr=config.lr)
    losses = np.empty(config.iterations)
    for it in range(config.iterations):
        x0, x1 = coupling.draw(rng, config.batch_size)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        xt = interpolate(x0, x1, t)
        loss, grads = gradient(params, xt, t, x1 - x0)
        if not np.isfinite(loss):
            raise TrainingDiverged(it)
        losses[it] = loss
        frac = it / max(config.iterations - 1, 1)
        opt.lr = config.lr * (config.final_lr_frac + (1 - config.final_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        params, opt = adam_step(params, grads, opt)
        if (it + 1) % 500 == 0:
            log.info("iter %d loss %.4f", it + 1, loss)
    if not params.is_finite():
        raise TrainingDiverged(config.iterations)
    return TrainResult(params, losses, config)


def generate_coupling(params: MLPParams, source: GaussianMixtureSpec, n: int, seed: int,
                      n_steps: int = 100, kind=SolverKind.FIREFLOW) -> Coupling:
    """Pair fresh source draws with their images under the learned flow."""
    x0 = sample_mixture(source, n, seed)
    traj = integrate(MLPField(params), x0, TimeGrid.uniform(n_steps), kind)
    return Coupling(x0, traj.final, provenance="model-generated")


def reflow(params: MLPParams, config: TrainConfig, source: GaussianMixtureSpec, n_pairs: int = 10000,
           n_steps: int = 100, warm_start: bool = True) -> tuple[Coupling, TrainResult]:
    """Re-couple through the trained flow, then retrain on the generated pairs (2-rectified flow)."""
    coupling = generate_coupling(params, source, n_pairs, seed=config.seed + 1, n_steps=n_steps)
    result = train_rectified_flow(config, coupling, init=params if warm_start else None)
    return coupling, result
