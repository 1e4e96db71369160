"""Deterministic observation featurizer.

Layout (version ``feat-v1``, d = 64):

* map block (40): 8 scalars, then a robot-centred window pooled 4x4 into
  occupied fractions (16) and unknown fractions (16);
* target block (24): per-target features pooled by mean/max/min over the
  ever-detected set, counts, and two anchor offsets.

Cells outside the grid count as occupied in the pooled window. Offsets are
expressed in a robot-centred frame with world-aligned axes.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefSet
from .env import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .experts import detect_frontiers

FEATURE_VERSION = "feat-v1"

MAP_SCALARS = [
    "revealed_fraction",
    "frontier_count",
    "nearest_frontier_distance",
    "nearest_frontier_dir_x",
    "nearest_frontier_dir_y",
    "visitation_entropy",
    "revealed_gain",
    "bias",
]
PER_TARGET = ["rel_x", "rel_y", "speed", "log_trace_pos", "logdet_per_dim", "log_staleness"]
# raw value kept as-is by the normaliser
UNNORMALISED = ("bias",)


@dataclass
class Snapshot:
    step: int
    grid: OccupancyGrid
    position: np.ndarray
    beliefs: BeliefSet
    detected: frozenset
    visits: np.ndarray


class ObservationHistory:
    """Fixed-length window of snapshots, front-padded by repetition."""

    def __init__(self, t_obs: int):
        if t_obs < 1:
            raise ValueError("t_obs must be >= 1")
        self.t_obs = t_obs
        self._buf: deque[Snapshot] = deque(maxlen=t_obs)

    def push(self, snap: Snapshot):
        if not self._buf:
            for _ in range(self.t_obs - 1):
                self._buf.append(snap)
        self._buf.append(snap)

    @property
    def snapshots(self) -> list[Snapshot]:
        return list(self._buf)

    @property
    def latest(self) -> Snapshot:
        return self._buf[-1]

    def __len__(self):
        return len(self._buf)


@dataclass
class FeatureLayout:
    window: int = 16
    pools: int = 4
    frontier_cap: int = 10
    fov_radius: float = 5.0

    @property
    def names(self) -> list[str]:
        p = self.pools
        names = list(MAP_SCALARS)
        names += [f"occ_{i}_{j}" for i in range(p) for j in range(p)]
        names += [f"unk_{i}_{j}" for i in range(p) for j in range(p)]
        names += [f"{stat}_{n}" for stat in ("mean", "max", "min") for n in PER_TARGET]
        names += ["detected_count", "visible_count",
                  "uncertain_rel_x", "uncertain_rel_y", "fresh_rel_x", "fresh_rel_y"]
        return names

    @property
    def d_map(self) -> int:
        return len(MAP_SCALARS) + 2 * self.pools * self.pools

    @property
    def d_target(self) -> int:
        return 3 * len(PER_TARGET) + 6

    @property
    def dim(self) -> int:
        return self.d_map + self.d_target

    def to_dict(self) -> dict:
        return {"version": FEATURE_VERSION, "window": self.window, "pools": self.pools,
                "frontier_cap": self.frontier_cap, "fov_radius": self.fov_radius, "names": self.names}

    @classmethod
    def from_config(cls, cfg) -> "FeatureLayout":
        f = cfg.features
        return cls(f.window, f.pools, f.frontier_cap, cfg.world.fov_radius)


def _pooled_window(grid: OccupancyGrid, cell, window: int, pools: int) -> tuple[np.ndarray, np.ndarray]:
    half = window // 2
    x0, y0 = cell[0] - half, cell[1] - half
    patch = np.full((window, window), OCCUPIED, dtype=np.int8)
    gx0, gy0 = max(0, x0), max(0, y0)
    gx1, gy1 = min(grid.width, x0 + window), min(grid.height, y0 + window)
    if gx1 > gx0 and gy1 > gy0:
        patch[gy0 - y0 : gy1 - y0, gx0 - x0 : gx1 - x0] = grid.cells[gy0:gy1, gx0:gx1]
    s = window // pools
    blocks = patch[: s * pools, : s * pools].reshape(pools, s, pools, s)
    occ = (blocks == OCCUPIED).mean(axis=(1, 3))
    unk = (blocks == UNKNOWN).mean(axis=(1, 3))
    return occ.ravel(), unk.ravel()


def encode_map(history: ObservationHistory, layout: FeatureLayout) -> np.ndarray:
    snap = history.latest
    oldest = history.snapshots[0]
    g = snap.grid
    n_cells = g.cells.size
    revealed = float(np.count_nonzero(g.cells != UNKNOWN)) / n_cells
    revealed_old = float(np.count_nonzero(oldest.grid.cells != UNKNOWN)) / n_cells
    frontiers = detect_frontiers(g)
    diag = math.hypot(g.width, g.height) * g.resolution
    count = min(len(frontiers), layout.frontier_cap) / layout.frontier_cap
    if frontiers:
        cents = np.array([f.centroid for f in frontiers])
        d = cents - snap.position
        dist = np.hypot(d[:, 0], d[:, 1])
        i = int(np.lexsort((np.arange(len(dist)), dist))[0])
        near = dist[i] / diag
        dvec = d[i] / dist[i] if dist[i] > 0 else np.zeros(2)
    else:
        near, dvec = 1.0, np.zeros(2)
    v = snap.visits[snap.visits > 0].astype(float)
    if v.size > 1:
        p = v / v.sum()
        ent = float(-(p * np.log(p)).sum() / math.log(max(np.count_nonzero(g.cells == FREE), 2)))
    else:
        ent = 0.0
    scalars = np.array([revealed, count, near, dvec[0], dvec[1], ent, 10.0 * (revealed - revealed_old), 1.0])
    occ, unk = _pooled_window(g, g.cell_of(snap.position), layout.window, layout.pools)
    return np.concatenate([scalars, occ, unk])


def _target_rows(snap: Snapshot, scale: float) -> tuple[np.ndarray, list]:
    rows, ids = [], []
    for tid, b in sorted(snap.beliefs.items()):
        rel = (b.mean[:2] - snap.position) / scale
        speed = float(np.hypot(b.mean[2], b.mean[3]))
        tr = float(np.trace(b.cov[:2, :2]))
        _, logdet = np.linalg.slogdet(b.cov)
        stale = snap.step - (b.last_detected if b.last_detected is not None else snap.step)
        rows.append([rel[0], rel[1], speed, math.log(tr), logdet / b.cov.shape[0], math.log1p(max(stale, 0))])
        ids.append(tid)
    return np.array(rows, dtype=float).reshape(-1, len(PER_TARGET)), ids


def encode_targets(history: ObservationHistory, layout: FeatureLayout) -> np.ndarray:
    snap = history.latest
    out = np.zeros(layout.d_target)
    rows, _ = _target_rows(snap, max(layout.fov_radius, 1.0))
    n = rows.shape[0]
    if n == 0:
        return out
    k = len(PER_TARGET)
    # canonical row order by value, so pooled sums never depend on id labels
    rows = rows[np.lexsort(rows.T[::-1])]
    out[0:k] = rows.mean(axis=0)
    out[k : 2 * k] = rows.max(axis=0)
    out[2 * k : 3 * k] = rows.min(axis=0)
    out[3 * k] = n / 10.0
    out[3 * k + 1] = len(snap.detected) / 10.0
    # anchors chosen by feature values only, so id order never matters
    unc = np.lexsort(tuple(rows[:, c] for c in range(k - 1, -1, -1)) + (-rows[:, 3],))[0]
    fresh = np.lexsort(tuple(rows[:, c] for c in range(k - 1, -1, -1)) + (rows[:, 5],))[0]
    out[3 * k + 2 : 3 * k + 4] = rows[unc, 0:2]
    out[3 * k + 4 : 3 * k + 6] = rows[fresh, 0:2]
    return out


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, raw: np.ndarray, layout: FeatureLayout) -> "Normalizer":
        raw = np.asarray(raw, dtype=float)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        keep = (std < 1e-9) | np.isin(np.array(layout.names), UNNORMALISED)
        mean = np.where(keep, 0.0, mean)
        scale = np.where(keep, 1.0, std)
        return cls(mean, scale)


@dataclass
class Featurizer:
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    normalizer: Normalizer | None = None

    @property
    def dim(self) -> int:
        return self.layout.dim

    def raw(self, history: ObservationHistory) -> np.ndarray:
        return np.concatenate([encode_map(history, self.layout), encode_targets(history, self.layout)])

    def __call__(self, history: ObservationHistory) -> np.ndarray:
        x = self.raw(history)
        return self.normalizer.apply(x) if self.normalizer is not None else x

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return self.normalizer.apply(raw) if self.normalizer is not None else np.asarray(raw, dtype=float)

    def manifest(self) -> dict:
        m = self.layout.to_dict()
        if self.normalizer is not None:
            m["norm_mean"] = [float(v) for v in self.normalizer.mean]
            m["norm_scale"] = [float(v) for v in self.normalizer.scale]
        m["hash"] = manifest_hash(m)
        return m

    @classmethod
    def from_manifest(cls, m: dict) -> "Featurizer":
        body = {k: v for k, v in m.items() if k != "hash"}
        if m.get("hash") != manifest_hash(body):
            raise ValueError("feature manifest hash mismatch")
        if m.get("version") != FEATURE_VERSION:
            raise ValueError(f"unsupported feature layout version {m.get('version')!r}")
        layout = FeatureLayout(m["window"], m["pools"], m["frontier_cap"], m["fov_radius"])
        if layout.names != m["names"]:
            raise ValueError("feature manifest names do not match this featurizer")
        norm = None
        if "norm_mean" in m:
            norm = Normalizer(np.array(m["norm_mean"]), np.array(m["norm_scale"]))
        return cls(layout, norm)


def manifest_hash(m: dict) -> str:
    body = {k: v for k, v in m.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
