"""Expert selection over per-head predictive distributions, plus the
deterministic-gating and MC-dropout baselines.

Convention: experts are 1-based ids; selection maximises predicted reward
(negative NLL). The NLL regressor baseline uses argmin over predicted NLL,
which picks the same expert. Ties always go to the lowest id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nn import Adam, Mlp, softmax


class Strategy(str, Enum):
    GREEDY = "greedy"
    LCB = "lcb"
    UCB = "ucb"
    THOMPSON = "thompson"


@dataclass(frozen=True)
class SelectionStrategy:
    kind: Strategy = Strategy.LCB
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and >= 0")


def _argmax(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index
    return int(np.argmax(scores)) + 1


def strategy_scores(means, stds, strategy: SelectionStrategy, rng: np.random.Generator | None = None) -> np.ndarray:
    m = np.asarray(means, dtype=float)
    s = np.asarray(stds, dtype=float)
    if m.shape != s.shape or m.ndim != 1 or m.size == 0:
        raise ValueError("need K >= 1 matching means and stds")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
        raise ValueError("NaN or inf in expert predictions")
    if np.any(s < 0):
        raise ValueError("standard deviations must be >= 0")
    kind = strategy.kind
    if kind == Strategy.GREEDY:
        return m.copy()
    if kind == Strategy.LCB:
        return m - strategy.lam * s
    if kind == Strategy.UCB:
        return m + strategy.lam * s
    if rng is None:
        raise ValueError("Thompson sampling needs an rng")
    # one draw per head, even for zero-width heads, so the stream stays aligned
    return m + s * rng.standard_normal(m.size)


def select_expert(means, stds, strategy: SelectionStrategy,
                  rng: np.random.Generator | None = None) -> int:
    return _argmax(strategy_scores(means, stds, strategy, rng))


def moe_select(classifier: Mlp, features) -> int:
    logits = classifier.forward(np.asarray(features, dtype=float))
    return _argmax(softmax(logits))


def mlp_regress_select(regressor: "NllRegressor | Mlp", features) -> int:
    nll = regressor.predict(features) if isinstance(regressor, NllRegressor) else regressor.forward(features)
    return int(np.argmin(np.asarray(nll, dtype=float))) + 1


def mc_dropout_predict(head: Mlp, features, T: int, rng: np.random.Generator,
                       offset: float = 0.0, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """T stochastic train-mode passes; sample mean and unbiased variance per output."""
    if T < 2:
        raise ValueError("MC dropout needs T >= 2 passes")
    x = np.asarray(features, dtype=float)
    outs = np.stack([head.forward(x, train=True, rng=rng) for _ in range(T)])
    head._cache = None
    outs = offset + scale * outs
    return outs.mean(axis=0), outs.var(axis=0, ddof=1)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    hidden: tuple = (64, 64)
    epochs: int = 300
    lr: float = 3e-3
    batch_size: int = 256
    dropout: float = 0.1


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s : s + size]


def train_classifier(phi, labels, n_classes: int, cfg: TrainConfig, rng: np.random.Generator) -> Mlp:
    """Softmax MLP trained by cross-entropy on 1-based labels."""
    x = np.asarray(phi, dtype=float)
    y = np.asarray(labels, dtype=int) - 1
    net = Mlp([x.shape[1], *cfg.hidden, n_classes], "relu", rng=rng)
    opt = Adam(lr=cfg.lr)
    onehot = np.eye(n_classes)[y]
    for _ in range(cfg.epochs):
        for b in _batches(len(x), cfg.batch_size, rng):
            p = softmax(net.forward(x[b], train=True))
            grads, _ = net.backward((p - onehot[b]) / len(b))
            opt.step(net.params, grads)
    net._cache = None
    return net


def _masked_regression(x, y, experts, n_out: int, cfg: TrainConfig, rng: np.random.Generator,
                       dropout: float) -> tuple[Mlp, float, float]:
    """MLP with one output per expert; only the generating expert's output
    receives loss. Targets are standardised; returns (net, offset, scale)."""
    y = np.asarray(y, dtype=float)
    k = np.asarray(experts, dtype=int) - 1
    offset = float(y.mean())
    scale = float(y.std()) or 1.0
    t = (y - offset) / scale
    net = Mlp([x.shape[1], *cfg.hidden, n_out], "relu", dropout=dropout, rng=rng)
    opt = Adam(lr=cfg.lr)
    mask = np.eye(n_out)[k]
    for _ in range(cfg.epochs):
        for b in _batches(len(x), cfg.batch_size, rng):
            out = net.forward(x[b], train=True, rng=rng)
            err = (out - t[b, None]) * mask[b]
            grads, _ = net.backward(2.0 * err / len(b))
            opt.step(net.params, grads)
    net._cache = None
    return net, offset, scale


@dataclass
class NllRegressor:
    """Deterministic per-expert NLL predictor (baseline)."""
    net: Mlp
    offset: float
    scale: float

    def predict(self, features) -> np.ndarray:
        return self.offset + self.scale * self.net.forward(np.asarray(features, dtype=float))


@dataclass
class DropoutRewardHead:
    """Per-expert reward predictor with dropout, queried by MC sampling."""
    net: Mlp
    offset: float
    scale: float

    def predict(self, features, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return mc_dropout_predict(self.net, features, T, rng, self.offset, self.scale)


def train_nll_regressor(phi, nll, experts, n_experts: int, cfg: TrainConfig,
                        rng: np.random.Generator) -> NllRegressor:
    net, off, sc = _masked_regression(np.asarray(phi, dtype=float), nll, experts, n_experts, cfg, rng, 0.0)
    return NllRegressor(net, off, sc)


def train_dropout_head(phi, reward, experts, n_experts: int, cfg: TrainConfig,
                       rng: np.random.Generator) -> DropoutRewardHead:
    if cfg.dropout <= 0:
        raise ValueError("MC dropout head needs a dropout rate > 0")
    net, off, sc = _masked_regression(np.asarray(phi, dtype=float), reward, experts, n_experts, cfg, rng,
                                      cfg.dropout)
    return DropoutRewardHead(net, off, sc)
