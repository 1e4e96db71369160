"""Per-target Kalman filtering and tracking metrics (NLL, RMSE, entropy)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .env import Measurement, TargetState, WorldConfig

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    pass


@dataclass
class TargetBelief:
    mean: np.ndarray
    cov: np.ndarray
    # step of the most recent update; None if never updated
    last_detected: int | None = None
    first_detected: int | None = None


BeliefSet = dict  # target id -> TargetBelief; keys are the ever-detected ids


@dataclass
class FilterModel:
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    sigma_init: float = 10.0

    @classmethod
    def constant_velocity(cls, world: WorldConfig, kappa_q: float = 2.0, kappa_r: float = 2.0,
                          sigma_init: float = 10.0) -> "FilterModel":
        eye = np.eye(2)
        F = np.block([[eye, eye], [np.zeros((2, 2)), eye]])
        # velocity increment also enters the position update: p' = p + v + w
        G = np.vstack([eye, eye])
        Q = kappa_q * (G @ world.Q @ G.T)
        return cls(F, Q, world.H.copy(), kappa_r * world.R, sigma_init)

    @classmethod
    def from_config(cls, cfg: Config, world: WorldConfig | None = None) -> "FilterModel":
        world = world or WorldConfig.from_config(cfg)
        f = cfg.filter
        return cls.constant_velocity(world, f.kappa_q, f.kappa_r, f.sigma_init)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def kf_predict(belief: TargetBelief, model: FilterModel) -> TargetBelief:
    mean = model.F @ belief.mean
    cov = _sym(model.F @ belief.cov @ model.F.T + model.Q)
    return TargetBelief(mean, cov, belief.last_detected, belief.first_detected)


def kf_update(belief: TargetBelief, z, model: FilterModel, step: int | None = None) -> TargetBelief:
    """Kalman update with Joseph-form covariance."""
    z = np.asarray(z, dtype=float)
    H, R = model.H, model.R
    if z.shape != (H.shape[0],):
        raise ValueError(f"measurement must have shape ({H.shape[0]},)")
    P = belief.cov
    S = _sym(H @ P @ H.T + R)
    try:
        Ls = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    # K = P H^T S^-1 via two triangular solves
    PHt = P @ H.T
    K = np.linalg.solve(Ls.T, np.linalg.solve(Ls, PHt.T)).T
    mean = belief.mean + K @ (z - H @ belief.mean)
    A = np.eye(P.shape[0]) - K @ H
    cov = _sym(A @ P @ A.T + K @ R @ K.T)
    return TargetBelief(mean, cov, step, belief.first_detected)


def init_belief(z, model: FilterModel, step: int) -> TargetBelief:
    mean = np.linalg.pinv(model.H) @ np.asarray(z, dtype=float)
    n = model.F.shape[0]
    return TargetBelief(mean, np.eye(n) * model.sigma_init**2, step, step)


def filter_step(beliefs: BeliefSet, measurements: list[Measurement], model: FilterModel, step: int) -> BeliefSet:
    """Predict every existing belief, then update (or initialise) detected ones."""
    out = {tid: kf_predict(b, model) for tid, b in beliefs.items()}
    for m in measurements:
        if m.target_id in out:
            out[m.target_id] = kf_update(out[m.target_id], m.value, model, step)
        else:
            out[m.target_id] = init_belief(m.value, model, step)
    return out


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc


def nll_single(belief: TargetBelief, truth: TargetState | np.ndarray) -> float:
    y = truth.state if isinstance(truth, TargetState) else np.asarray(truth, dtype=float)
    L = _chol(belief.cov)
    r = np.linalg.solve(L, y - belief.mean)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return 0.5 * (logdet + float(r @ r) + y.size * LOG_2PI)


def _truth_map(truths) -> dict[int, np.ndarray]:
    if isinstance(truths, dict):
        return {k: (v.state if isinstance(v, TargetState) else np.asarray(v, dtype=float)) for k, v in truths.items()}
    return {t.id: t.state for t in truths}


def nll_aggregate(beliefs: BeliefSet, truths) -> float | None:
    """Mean NLL over the ever-detected targets; None when there are none."""
    if not beliefs:
        return None
    tm = _truth_map(truths)
    vals = [nll_single(b, tm[tid]) for tid, b in sorted(beliefs.items())]
    return float(sum(vals) / len(vals))


def rmse(beliefs: BeliefSet, truths) -> float | None:
    if not beliefs:
        return None
    tm = _truth_map(truths)
    sq = [float(np.sum((b.mean[:2] - tm[tid][:2]) ** 2)) for tid, b in sorted(beliefs.items())]
    return math.sqrt(sum(sq) / len(sq))


def gaussian_entropy(cov: np.ndarray) -> float:
    L = _chol(cov)
    n = cov.shape[0]
    return 0.5 * (n * (LOG_2PI + 1.0) + 2.0 * float(np.sum(np.log(np.diag(L)))))


def belief_entropy(beliefs: BeliefSet) -> float | None:
    if not beliefs:
        return None
    vals = [gaussian_entropy(b.cov) for _, b in sorted(beliefs.items())]
    return float(sum(vals) / len(vals))
