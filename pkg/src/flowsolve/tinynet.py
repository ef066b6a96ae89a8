"""A small tanh MLP v(x, t) with hand-written backprop and Adam.

Time enters as one extra input coordinate: the network sees ``concat(x, t)``.
Weights are stored ``(out, in)`` so a layer computes ``h @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from flowsolve.fields import VelocityField

FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "identity")


@dataclass
class MLPParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            if W.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ValueError(f"layer {k}: expected W{(n_out, n_in)} b{(n_out,)}, got W{W.shape} b{b.shape}")

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MLPParams":
        return MLPParams(self.layer_sizes, list(arrays[0::2]), list(arrays[1::2]), self.activation)

    def copy(self) -> "MLPParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(dim: int = 2, hidden=(64, 64, 64), seed: int = 0, activation: str = "tanh") -> MLPParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [dim + 1, *hidden, dim]
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MLPParams(sizes, weights, biases, activation)


def _inputs(params: MLPParams, x, t) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] + 1 != params.layer_sizes[0]:
        raise ValueError(f"input of shape {x.shape} does not fit layer sizes {params.layer_sizes}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))
    return np.concatenate([x2, t[:, None]], axis=1), single


def _act(params, z):
    return np.tanh(z) if params.activation == "tanh" else z


def forward(params: MLPParams, x, t) -> np.ndarray:
    h, single = _inputs(params, x, t)
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if k < last:
            h = _act(params, h)
    return h[0] if single else h


def gradient(params: MLPParams, x, t, target) -> tuple[float, MLPParams]:
    """Mean squared error ``mean_b ||target_b - f(x_b, t_b)||^2`` and its exact gradient."""
    h, _ = _inputs(params, x, t)
    if h.shape[0] == 0:
        raise ValueError("empty batch")
    target = np.asarray(target, dtype=np.float64).reshape(h.shape[0], -1)
    last = len(params.weights) - 1
    acts = [h]
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if k < last:
            h = _act(params, h)
        acts.append(h)
    resid = target - h
    B = h.shape[0]
    loss = float(np.sum(resid * resid) / B)

    g = -2.0 / B * resid
    gW, gb = [None] * len(params.weights), [None] * len(params.weights)
    for k in range(last, -1, -1):
        gW[k] = g.T @ acts[k]
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = g @ params.weights[k]
            if params.activation == "tanh":
                g = g * (1.0 - acts[k] ** 2)
    return loss, MLPParams(params.layer_sizes, gW, gb, params.activation)


def output_bound(params: MLPParams) -> float:
    """Upper bound on ``||forward(x, t)||`` for tanh networks: ``||W_last||_2 sqrt(H) + ||b_last||``."""
    if params.activation != "tanh" or len(params.weights) < 2:
        raise ValueError("bound needs at least one tanh hidden layer")
    W, b = params.weights[-1], params.biases[-1]
    return float(np.linalg.norm(W, 2) * np.sqrt(W.shape[1]) + np.linalg.norm(b))


@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: MLPParams, lr: float = 1e-3, **kw) -> "OptState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, lr=lr, **kw)


def adam_step(params: MLPParams, grads: MLPParams, opt: OptState) -> tuple[MLPParams, OptState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    step = opt.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameters")
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1**step)
        v_hat = v / (1 - opt.beta2**step)
        new_p.append(p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), OptState(new_m, new_v, step, opt.lr, opt.beta1, opt.beta2, opt.eps)


class MLPField(VelocityField):
    """A trained network used as a flow drift."""

    def __init__(self, params: MLPParams):
        self.params = params
        self.dim = params.dim
        self.lipschitz = None

    def velocity(self, x, t):
        return forward(self.params, x, t)


def to_json(params: MLPParams) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "layer_sizes": params.layer_sizes,
        "activation": params.activation,
        "weights": [W.tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    return json.dumps(doc)


def from_json(text: str) -> MLPParams:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    return MLPParams(
        doc["layer_sizes"],
        [np.asarray(W, dtype=np.float64) for W in doc["weights"]],
        [np.asarray(b, dtype=np.float64) for b in doc["biases"]],
        doc["activation"],
    )


def save_checkpoint(params: MLPParams, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(to_json(params))
        fh.write("\n")


def load_checkpoint(path) -> MLPParams:
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())
