"""Multi-head variational Bayesian last-layer reward model.

Each head k models ``r = phi^T beta_k + eta``, ``eta ~ N(0, s2_k)``, with
prior ``beta_k ~ N(0, prior_var I)`` and a full-covariance Gaussian
posterior ``q = N(mu, L L^T)``. ``L`` is lower triangular with its diagonal
stored in log space, so the covariance is positive definite by construction.

The ELBO is the closed form of

    E_q[sum_n log N(r_n; phi_n^T beta, s2)] - KL(q || prior)

with the Gaussian normalising constant counted once per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize
from .nn import Adam

LOG_2PI = math.log(2.0 * math.pi)


class ConfigurationError(ValueError):
    pass


@dataclass
class VbllHead:
    mu: np.ndarray
    L_off: np.ndarray  # strictly-lower part of L (upper triangle ignored)
    log_diag: np.ndarray
    log_noise_var: float

    @classmethod
    def init(cls, d: int, prior_var: float = 1.0, noise_var: float = 1.0) -> "VbllHead":
        return cls(np.zeros(d), np.zeros((d, d)), np.full(d, 0.5 * math.log(prior_var)), math.log(noise_var))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def L(self) -> np.ndarray:
        return np.tril(self.L_off, -1) + np.diag(np.exp(self.log_diag))

    @property
    def cov(self) -> np.ndarray:
        L = self.L
        return L @ L.T

    @property
    def noise_var(self) -> float:
        return math.exp(self.log_noise_var)

    def copy(self) -> "VbllHead":
        return VbllHead(self.mu.copy(), self.L_off.copy(), self.log_diag.copy(), float(self.log_noise_var))

    # flat parameter vector: mu | strict lower of L | log diag | log noise var
    def pack(self) -> np.ndarray:
        il = np.tril_indices(self.dim, -1)
        return np.concatenate([self.mu, self.L_off[il], self.log_diag, [self.log_noise_var]])

    def unpack(self, theta: np.ndarray):
        d = self.dim
        il = np.tril_indices(d, -1)
        m = len(il[0])
        self.mu = theta[:d].copy()
        self.L_off = np.zeros((d, d))
        self.L_off[il] = theta[d : d + m]
        self.log_diag = theta[d + m : 2 * d + m].copy()
        self.log_noise_var = float(theta[-1])


def _check(phi, r):
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    if phi.shape[0] != r.size:
        raise ValueError("features and rewards differ in length")
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(r))):
        raise ValueError("NaN or inf in VBLL inputs")
    return phi, r


def elbo(head: VbllHead, phi, r, prior_var: float = 1.0) -> float:
    return elbo_and_grad(head, phi, r, prior_var)[0]


def elbo_and_grad(head: VbllHead, phi, r, prior_var: float = 1.0, learn_noise: bool = True):
    """Closed-form ELBO and its gradient w.r.t. ``head.pack()``."""
    phi, r = _check(phi, r)
    n, d = phi.shape
    L = head.L
    s2 = head.noise_var
    mu = head.mu
    resid = r - phi @ mu
    PL = phi @ L
    quad = float(np.sum(PL * PL))  # sum_n phi_n^T Sigma phi_n
    data = float(resid @ resid) + quad
    tr = float(np.sum(L * L))
    logdet = 2.0 * float(np.sum(head.log_diag))
    val = (-0.5 * n * (LOG_2PI + head.log_noise_var)
           - data / (2.0 * s2)
           - (tr + float(mu @ mu)) / (2.0 * prior_var)
           + 0.5 * (d + logdet - d * math.log(prior_var)))
    g_mu = phi.T @ resid / s2 - mu / prior_var
    gL = -(phi.T @ PL) / s2 - L / prior_var
    il = np.tril_indices(d, -1)
    g_off = gL[il]
    diag = np.exp(head.log_diag)
    g_logdiag = np.diag(gL) * diag + 1.0
    g_s = (-0.5 * n + data / (2.0 * s2)) if learn_noise else 0.0
    return val, np.concatenate([g_mu, g_off, g_logdiag, [g_s]])


def kl_gaussians(m0, S0, m1, S1) -> float:
    """KL(N(m0, S0) || N(m1, S1))."""
    d = len(m0)
    L1 = np.linalg.cholesky(S1)
    L0 = np.linalg.cholesky(S0)
    A = np.linalg.solve(L1, L0)
    dm = np.linalg.solve(L1, np.asarray(m1) - np.asarray(m0))
    return 0.5 * (float(np.sum(A * A)) + float(dm @ dm) - d
                  + 2.0 * float(np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0)))))


def conjugate_posterior(phi, r, prior_var: float, sigma_eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact Bayesian linear regression posterior."""
    if sigma_eta <= 0:
        raise ValueError("sigma_eta must be positive")
    phi = np.asarray(phi, dtype=float)
    r = np.asarray(r, dtype=float).ravel()
    d = phi.shape[1] if phi.ndim == 2 else 0
    s2 = sigma_eta**2
    prec = phi.T @ phi / s2 + np.eye(d) / prior_var
    Lp = np.linalg.cholesky(prec)
    inv_Lp = np.linalg.solve(Lp, np.eye(d))
    cov = inv_Lp.T @ inv_Lp
    mean = np.linalg.solve(Lp.T, np.linalg.solve(Lp, phi.T @ r / s2)) if r.size else np.zeros(d)
    return mean, 0.5 * (cov + cov.T)


def predict(head: VbllHead, phi) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Predictive mean and variance; works on one (d,) or many (n, d) features."""
    x = np.asarray(phi, dtype=float)
    PL = x @ head.L
    mean = x @ head.mu
    var = np.sum(PL * PL, axis=-1) + head.noise_var
    if x.ndim == 1:
        return float(mean), float(var)
    return mean, var


def vbll_loss(heads: list[VbllHead], phi, r, experts, prior_var: float = 1.0, learn_noise: bool = True):
    """Sum over heads of (|B_k| / B) * (-ELBO_k) on a mini-batch.

    ``experts`` holds 1-based head ids. Returns ``(loss, grads)`` with one
    packed gradient per head (zeros for heads absent from the batch).
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    k = np.asarray(experts, dtype=int).ravel()
    B = len(r)
    if B == 0:
        raise ValueError("empty batch")
    loss = 0.0
    grads = []
    for hk, head in enumerate(heads, start=1):
        sel = k == hk
        nb = int(sel.sum())
        if nb == 0:
            grads.append(np.zeros_like(head.pack()))
            continue
        w = nb / B
        val, g = elbo_and_grad(head, phi[sel], r[sel], prior_var, learn_noise)
        loss -= w * val
        grads.append(-w * g)
    return loss, grads


@dataclass
class FitConfig:
    prior_var: float = 1.0
    lr: float = 0.3
    lr_final: float = 1e-7
    max_epochs: int = 10000
    grad_tol: float = 1e-6
    learn_noise: bool = True
    init_noise_var: float = 1.0

    @classmethod
    def from_config(cls, cfg) -> "FitConfig":
        v = cfg.vbll
        return cls(v.prior_var, v.lr, v.lr_final, v.max_epochs, v.grad_tol, v.learn_noise, v.init_noise_var)


def fit(phi, r, experts, n_heads: int, config: FitConfig | None = None,
        init_noise_var: list[float] | None = None) -> tuple[list[VbllHead], dict]:
    """Full-batch Adam on ``vbll_loss`` with a geometric learning-rate decay.

    Each head has its own optimiser and stops once its packed-gradient norm
    drops below ``grad_tol`` (or after ``max_epochs``), so a head depends
    only on its own expert's samples. Deterministic (no sampling).
    """
    cfg = config or FitConfig()
    phi, r = _check(phi, r)
    k = np.asarray(experts, dtype=int).ravel()
    for hk in range(1, n_heads + 1):
        if not np.any(k == hk):
            raise ConfigurationError(f"expert {hk} has no training samples")
    d = phi.shape[1]
    nv = init_noise_var or [cfg.init_noise_var] * n_heads
    heads = [VbllHead.init(d, cfg.prior_var, nv[i]) for i in range(n_heads)]
    thetas = [h.pack() for h in heads]
    opts = [Adam(lr=cfg.lr) for _ in range(n_heads)]
    active = [True] * n_heads
    norms = [math.inf] * n_heads
    epochs = [0] * n_heads
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.max_epochs - 1, 1))
    history = []
    for epoch in range(cfg.max_epochs):
        for h, th in zip(heads, thetas):
            h.unpack(th)
        loss, grads = vbll_loss(heads, phi, r, k, cfg.prior_var, cfg.learn_noise)
        history.append(loss)
        for i in range(n_heads):
            if not active[i]:
                continue
            norms[i] = float(np.linalg.norm(grads[i]))
            epochs[i] = epoch + 1
            if norms[i] < cfg.grad_tol:
                active[i] = False
                continue
            opts[i].step([thetas[i]], [grads[i]], lr=cfg.lr * decay**epoch)
        if not any(active):
            break
    for h, th in zip(heads, thetas):
        h.unpack(th)
    return heads, {"epochs": max(epochs), "head_epochs": epochs, "grad_norm": max(norms), "loss": history}


def save_heads(path_or_arrays, heads: list[VbllHead], feature_hash: str = "", prior_var: float = 1.0):
    arrays = {}
    for i, h in enumerate(heads):
        arrays[f"vbll{i}.mu"] = h.mu
        arrays[f"vbll{i}.L"] = h.L
        arrays[f"vbll{i}.log_noise_var"] = np.array([h.log_noise_var])
    meta = {"kind": "vbll", "K": len(heads), "d": heads[0].dim, "feature_hash": feature_hash, "prior_var": prior_var}
    if isinstance(path_or_arrays, dict):
        path_or_arrays.update(arrays)
        return meta
    serialize.save(path_or_arrays, arrays, meta)
    return meta


def heads_from_arrays(arrays: dict, K: int, d: int) -> list[VbllHead]:
    expected = {}
    for i in range(K):
        expected[f"vbll{i}.mu"] = (d,)
        expected[f"vbll{i}.L"] = (d, d)
        expected[f"vbll{i}.log_noise_var"] = (1,)
    serialize.check_manifest(arrays, expected)
    heads = []
    for i in range(K):
        L = arrays[f"vbll{i}.L"]
        diag = np.diag(L)
        if np.any(diag <= 0):
            raise serialize.ContainerError("VBLL covariance factor must have a positive diagonal")
        heads.append(VbllHead(arrays[f"vbll{i}.mu"].copy(), np.tril(L, -1), np.log(diag),
                              float(arrays[f"vbll{i}.log_noise_var"][0])))
    return heads


def load_heads(path: str | Path) -> tuple[list[VbllHead], dict]:
    arrays, meta = serialize.load(path)
    return heads_from_arrays(arrays, meta["K"], meta["d"]), meta
