"""Expert-conditioned DDPM over action sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import serialize
from .nn import Adam, Mlp


@dataclass
class VarianceSchedule:
    # index 0 holds the alpha_bar_0 := 1 convention; steps are 1..n_steps
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.alphas) - 1


def make_schedule(i_diff: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    if i_diff < 1:
        raise ValueError("i_diff must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, i_diff)
    alphas = np.concatenate([[1.0], 1.0 - betas])
    alpha_bars = np.cumprod(alphas)
    sig2 = np.zeros(i_diff + 1)
    for i in range(1, i_diff + 1):
        sig2[i] = (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * (1.0 - alphas[i])
    return VarianceSchedule(alphas, alpha_bars, np.sqrt(sig2))


def forward_diffuse(a0, i: int, eps, schedule: VarianceSchedule) -> np.ndarray:
    if not 1 <= int(i) <= schedule.n_steps:
        raise ValueError(f"diffusion step {i} outside 1..{schedule.n_steps}")
    ab = schedule.alpha_bars[int(i)]
    return math.sqrt(ab) * np.asarray(a0, dtype=float) + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def timestep_code(i, dim: int) -> np.ndarray:
    """Sinusoidal code of the diffusion step; shape (n, dim)."""
    i = np.atleast_1d(np.asarray(i, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """eps_theta(a_i, i, c) as an MLP over [noisy sequence | step code | c]."""

    def __init__(self, action_dim: int, cond_dim: int, hidden=(256, 256), time_dim: int = 16,
                 rng: np.random.Generator | None = None):
        self.action_dim = action_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.net = Mlp([action_dim + time_dim + cond_dim, *hidden, action_dim], "tanh", rng=rng)

    def inputs(self, a, i, c) -> np.ndarray:
        a = np.atleast_2d(a)
        i = np.broadcast_to(np.atleast_1d(i), (a.shape[0],))
        c = np.broadcast_to(np.atleast_2d(c), (a.shape[0], self.cond_dim))
        return np.concatenate([a, timestep_code(i, self.time_dim), c], axis=1)

    def __call__(self, a, i, c) -> np.ndarray:
        return self.net.forward(self.inputs(a, i, c))


DenoiserFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def build_conditioning(features, expert_id: int | None, embeddings: np.ndarray | None) -> np.ndarray:
    """[features | e_k]; with no embedding table the features pass through."""
    features = np.asarray(features, dtype=float)
    if embeddings is None:
        return features.copy()
    K = embeddings.shape[0]
    if expert_id is None or not 1 <= int(expert_id) <= K:
        raise ValueError(f"expert id {expert_id} outside 1..{K}")
    return np.concatenate([features, embeddings[int(expert_id) - 1]])


def denoise_step(a_i, i: int, c, denoiser: DenoiserFn, schedule: VarianceSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    a_i = np.atleast_2d(np.asarray(a_i, dtype=float))
    al, ab = schedule.alphas[i], schedule.alpha_bars[i]
    eps = denoiser(a_i, np.full(a_i.shape[0], i), c)
    mean = (a_i - (1.0 - al) / math.sqrt(1.0 - ab) * eps) / math.sqrt(al)
    if i == 1:
        return mean
    return mean + schedule.sigmas[i] * rng.standard_normal(a_i.shape)


def sample_actions(c, denoiser: DenoiserFn, schedule: VarianceSchedule, rng: np.random.Generator,
                   t_pred: int, n_u: int = 2, n_samples: int | None = None) -> np.ndarray:
    """Reverse chain from N(0, I). ``c`` is (dc,) or (n, dc)."""
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1 and n_samples is None
    n = c.shape[0] if c.ndim == 2 else (n_samples or 1)
    c2 = np.broadcast_to(np.atleast_2d(c), (n, c.shape[-1]))
    a = rng.standard_normal((n, t_pred * n_u))
    for i in range(schedule.n_steps, 0, -1):
        a = denoise_step(a, i, c2, denoiser, schedule, rng)
    a = a.reshape(n, t_pred, n_u)
    return a[0] if single else a


class DiffusionPolicy:
    def __init__(self, t_pred: int, n_u: int, feat_dim: int, n_experts: int | None, d_e: int = 8,
                 schedule: VarianceSchedule | None = None, hidden=(256, 256), time_dim: int = 16,
                 rng: np.random.Generator | None = None, feature_hash: str = ""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.t_pred, self.n_u, self.feat_dim = t_pred, n_u, feat_dim
        self.schedule = schedule or make_schedule()
        self.n_experts = n_experts
        self.d_e = d_e if n_experts else 0
        self.embeddings = rng.normal(0.0, 0.1, size=(n_experts, d_e)) if n_experts else None
        self.hidden = tuple(hidden)
        self.time_dim = time_dim
        self.denoiser = Denoiser(t_pred * n_u, feat_dim + self.d_e, hidden, time_dim, rng)
        self.feature_hash = feature_hash
        self.manifest: dict | None = None

    @property
    def conditioned(self) -> bool:
        return self.embeddings is not None

    def conditioning(self, features, expert_id: int | None) -> np.ndarray:
        return build_conditioning(features, expert_id, self.embeddings)

    def sample(self, features, expert_id: int | None, rng: np.random.Generator) -> np.ndarray:
        c = self.conditioning(features, expert_id)
        return sample_actions(c, self.denoiser, self.schedule, rng, self.t_pred, self.n_u)

    def save(self, path: str | Path, extra: dict | None = None):
        arrays = dict(self.denoiser.net.state_dict("den."))
        if self.embeddings is not None:
            arrays["embeddings"] = self.embeddings
        arrays["alphas"] = self.schedule.alphas
        meta = {"kind": "diffusion_policy", "t_pred": self.t_pred, "n_u": self.n_u, "feat_dim": self.feat_dim,
                "n_experts": self.n_experts, "d_e": self.d_e, "hidden": list(self.hidden),
                "time_dim": self.time_dim, "feature_hash": self.feature_hash, "manifest": self.manifest,
                **(extra or {})}
        serialize.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path, feature_hash: str | None = None) -> "DiffusionPolicy":
        arrays, meta = serialize.load(path)
        if meta.get("kind") != "diffusion_policy":
            raise serialize.ContainerError("not a diffusion policy checkpoint")
        if feature_hash is not None and meta["feature_hash"] != feature_hash:
            raise serialize.ContainerError("policy was trained against a different feature manifest")
        alphas = arrays["alphas"]
        sched = _schedule_from_alphas(alphas)
        pol = cls(meta["t_pred"], meta["n_u"], meta["feat_dim"], meta["n_experts"], meta["d_e"] or 8,
                  sched, meta["hidden"], meta["time_dim"], feature_hash=meta["feature_hash"])
        pol.manifest = meta.get("manifest")
        expected = {k: v.shape for k, v in pol.denoiser.net.state_dict("den.").items()}
        if pol.embeddings is not None:
            expected["embeddings"] = pol.embeddings.shape
        serialize.check_manifest(arrays, expected)
        pol.denoiser.net.load_state_dict(arrays, "den.")
        if pol.embeddings is not None:
            pol.embeddings = arrays["embeddings"].copy()
        return pol


def _schedule_from_alphas(alphas: np.ndarray) -> VarianceSchedule:
    ab = np.cumprod(alphas)
    sig2 = np.zeros_like(alphas)
    for i in range(1, len(alphas)):
        sig2[i] = (1.0 - ab[i - 1]) / (1.0 - ab[i]) * (1.0 - alphas[i])
    return VarianceSchedule(alphas.copy(), ab, np.sqrt(sig2))


def diffusion_loss(actions, features, experts, policy: DiffusionPolicy, rng: np.random.Generator,
                   denoiser: DenoiserFn | None = None):
    """Mean over the batch of ||eps - eps_theta(a_i, i, c)||^2 with one uniform
    step and one noise draw per sample.

    Returns ``(loss, denoiser_param_grads, embedding_grad)``. Gradients are
    only computed for the policy's own denoiser; a stub ``denoiser`` gives
    the loss alone.
    """
    a0 = np.asarray(actions, dtype=float).reshape(len(actions), -1)
    n = a0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    sched = policy.schedule
    steps = rng.integers(1, sched.n_steps + 1, size=n)
    eps = rng.standard_normal(a0.shape)
    ab = sched.alpha_bars[steps][:, None]
    a_i = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
    feats = np.asarray(features, dtype=float).reshape(n, -1)
    if policy.conditioned:
        idx = np.asarray(experts, dtype=int) - 1
        if np.any(idx < 0) or np.any(idx >= policy.n_experts):
            raise ValueError("expert id out of range")
        c = np.concatenate([feats, policy.embeddings[idx]], axis=1)
    else:
        c = feats
    if denoiser is not None:
        pred = denoiser(a_i, steps, c)
        return float(np.mean(np.sum((eps - pred) ** 2, axis=1))), None, None
    net = policy.denoiser.net
    pred = net.forward(policy.denoiser.inputs(a_i, steps, c), train=True)
    diff = pred - eps
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    grads, gin = net.backward(2.0 * diff / n)
    emb_grad = None
    if policy.conditioned:
        emb_grad = np.zeros_like(policy.embeddings)
        np.add.at(emb_grad, idx, gin[:, -policy.d_e :])
    return loss, grads, emb_grad


def fit_policy(policy: DiffusionPolicy, actions, features, experts, epochs: int, batch_size: int,
               lr: float, rng: np.random.Generator, log: Callable[[int, float], None] | None = None) -> list[float]:
    """Mini-batch Adam on the diffusion loss; returns per-epoch mean loss."""
    a = np.asarray(actions, dtype=float)
    f = np.asarray(features, dtype=float)
    k = np.asarray(experts, dtype=int) if experts is not None else np.ones(len(a), dtype=int)
    n = len(a)
    opt = Adam(lr=lr)
    params = policy.denoiser.net.params + ([policy.embeddings] if policy.conditioned else [])
    curve = []
    for ep in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            b = order[s : s + batch_size]
            loss, g, ge = diffusion_loss(a[b], f[b], k[b], policy, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"diffusion loss diverged at epoch {ep}")
            opt.step(params, g + ([ge] if policy.conditioned else []))
            total += loss * len(b)
        curve.append(total / n)
        if log is not None:
            log(ep, curve[-1])
    return curve
