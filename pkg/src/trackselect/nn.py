"""Small feed-forward networks with exact reverse-mode gradients, plus Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "linear")


class StateError(RuntimeError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


class Mlp:
    """Fully connected chain ``x -> act(x W + b) -> ... -> linear``.

    ``params`` is a flat list ``[W1, b1, W2, b2, ...]``; ``W`` has shape
    (fan_in, fan_out). Dropout (inverted) applies to hidden activations in
    train mode only.
    """

    def __init__(self, sizes, activation: str = "tanh", dropout: float = 0.0,
                 rng: np.random.Generator | None = None, zero: bool = False):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.dropout = float(dropout)
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        n_layers = len(self.sizes) - 1
        for li, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = li == n_layers - 1
            gain = 1.0 if (last or activation != "relu") else math.sqrt(2.0)
            bound = gain * math.sqrt(3.0 / fi)
            W = np.zeros((fi, fo)) if zero else rng.uniform(-bound, bound, size=(fi, fo))
            self.params += [W, np.zeros(fo)]
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def layer_activation(self, li: int) -> str:
        return "linear" if li == self.n_layers - 1 else self.activation

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dimension {x.shape[1]} != {self.sizes[0]}")
        cache = []
        h = x
        for li in range(self.n_layers):
            W, b = self.params[2 * li], self.params[2 * li + 1]
            z = h @ W + b
            name = self.layer_activation(li)
            a = _act(name, z)
            mask = None
            if train and self.dropout > 0.0 and li < self.n_layers - 1:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = 1.0 - self.dropout
                mask = (rng.random(a.shape) < keep) / keep
                out = a * mask
            else:
                out = a
            cache.append((h, z, a, mask))
            h = out
        self._cache = cache if train else None
        return h[0] if squeeze else h

    def backward(self, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(grad_out * y)`` w.r.t. params and the input."""
        if self._cache is None:
            raise StateError("backward() needs a preceding train-mode forward()")
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for li in reversed(range(self.n_layers)):
            h, z, a, mask = self._cache[li]
            if mask is not None:
                g = g * mask
            g = g * _act_grad(self.layer_activation(li), z, a)
            grads[2 * li] = h.T @ g
            grads[2 * li + 1] = g.sum(axis=0)
            g = g @ self.params[2 * li].T
        return grads, g

    def copy(self) -> "Mlp":
        m = Mlp.__new__(Mlp)
        m.sizes = list(self.sizes)
        m.activation = self.activation
        m.dropout = self.dropout
        m.params = [p.copy() for p in self.params]
        m._cache = None
        return m

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}p{i}": p for i, p in enumerate(self.params)}

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for i, p in enumerate(self.params):
            a = arrays[f"{prefix}p{i}"]
            if a.shape != p.shape:
                raise ValueError(f"shape mismatch for {prefix}p{i}: {a.shape} vs {p.shape}")
            self.params[i] = np.array(a, dtype=float)

    def spec(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation, "dropout": self.dropout}

    @classmethod
    def from_spec(cls, spec: dict) -> "Mlp":
        return cls(spec["sizes"], spec["activation"], spec["dropout"], zero=True)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None):
        """In-place bias-corrected update."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: Adam) -> tuple[list[np.ndarray], Adam]:
    state.step(params, grads)
    return params, state


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
