"""2-D grid world: occupancy map, holonomic robot, Brownian-velocity targets
and a disc field-of-view sensor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import Config

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

_SYMBOLS = {".": FREE, "#": OCCUPIED}


class MapParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class MapValidationError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # (height, width) int8, indexed [y, x]
    resolution: float = 1.0

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise MapValidationError("grid must be a non-empty 2-D array")
        if self.resolution <= 0:
            raise MapValidationError("resolution must be positive")

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.cells.copy(), self.resolution)

    def unknown_like(self) -> "OccupancyGrid":
        return OccupancyGrid(np.full_like(self.cells, UNKNOWN), self.resolution)

    def in_bounds(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def state(self, cell) -> int:
        x, y = cell
        return int(self.cells[y, x])

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and self.state(cell) == FREE

    def cell_of(self, position) -> tuple[int, int]:
        p = np.asarray(position, dtype=float) / self.resolution
        return int(math.floor(p[0] + 0.5)), int(math.floor(p[1] + 0.5))

    def center_of(self, cell) -> np.ndarray:
        return np.array([cell[0], cell[1]], dtype=float) * self.resolution

    def index(self, cell) -> int:
        return cell[1] * self.width + cell[0]

    def cell_at(self, index: int) -> tuple[int, int]:
        return index % self.width, index // self.width

    def free_count(self) -> int:
        return int(np.count_nonzero(self.cells == FREE))

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.cells == FREE)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]


def parse_map(text: str, resolution: float = 1.0) -> OccupancyGrid:
    lines = text.splitlines()
    if not lines:
        raise MapParseError("empty map file", 1, 1)
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise MapParseError("header must be 'W H'", 1, 1)
    width, height = int(header[0]), int(header[1])
    if width <= 0 or height <= 0:
        raise MapParseError("width and height must be positive", 1, 1)
    rows = lines[1 : 1 + height]
    if len(rows) < height:
        raise MapParseError(f"expected {height} grid rows, found {len(rows)}", len(lines) + 1, 1)
    cells = np.empty((height, width), dtype=np.int8)
    for y, row in enumerate(rows):
        lineno = y + 2
        if len(row) != width:
            raise MapParseError(f"expected {width} columns, found {len(row)}", lineno, min(len(row), width) + 1)
        for x, ch in enumerate(row):
            if ch not in _SYMBOLS:
                raise MapParseError(f"invalid symbol {ch!r}", lineno, x + 1)
            cells[y, x] = _SYMBOLS[ch]
    for extra, row in enumerate(lines[1 + height :], start=height + 2):
        if row.strip():
            raise MapParseError("trailing content after grid", extra, 1)
    border = np.concatenate([cells[0], cells[-1], cells[:, 0], cells[:, -1]])
    if np.any(border != OCCUPIED):
        raise MapValidationError("map border must be fully occupied ('#')")
    return OccupancyGrid(cells, resolution)


def load_map(path: str | Path, resolution: float = 1.0) -> OccupancyGrid:
    """Load a text grid map from a path, or a bundled map by bare name."""
    p = Path(path)
    if p.exists():
        return parse_map(p.read_text(), resolution)
    name = p.name if p.suffix else f"{p.name}.txt"
    bundled = resources.files("trackselect").joinpath("maps", name)
    if not bundled.is_file():
        raise FileNotFoundError(f"no map file or bundled map named {str(path)!r}")
    return parse_map(bundled.read_text(), resolution)


@dataclass
class RobotState:
    position: np.ndarray
    heading: float = 0.0
    clock: int = 0


@dataclass
class TargetState:
    position: np.ndarray
    velocity: np.ndarray
    id: int

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass
class Measurement:
    target_id: int
    value: np.ndarray
    step: int


def _check_psd(name: str, m: np.ndarray):
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(m)) < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass
class WorldConfig:
    Q: np.ndarray = field(default_factory=lambda: np.diag([90.0, 40.0]))
    R: np.ndarray = field(default_factory=lambda: np.eye(4) * 0.05**2)
    H: np.ndarray = field(default_factory=lambda: np.eye(4))
    fov_radius: float = 5.0
    n_targets: tuple[int, int] = (3, 6)
    episode_length: int = 400
    v_max: float = 1.0
    init_speed: float = 0.3

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        _check_psd("Q", self.Q)
        _check_psd("R", self.R)
        if np.linalg.matrix_rank(self.H) != self.H.shape[0]:
            raise ValueError("H must have full row rank")
        if self.fov_radius < 0 or self.v_max <= 0:
            raise ValueError("fov_radius must be >= 0 and v_max > 0")
        self.q_sqrt = _sqrtm_psd(self.Q)
        self.r_sqrt = _sqrtm_psd(self.R)

    @classmethod
    def from_config(cls, cfg: Config) -> "WorldConfig":
        w = cfg.world
        return cls(
            Q=np.asarray(w.q, dtype=float) * w.q_scale,
            R=np.diag([w.r_pos, w.r_pos, w.r_vel, w.r_vel]),
            H=np.eye(4),
            fov_radius=w.fov_radius,
            n_targets=(w.n_targets_min, w.n_targets_max),
            episode_length=w.episode_length,
            v_max=w.v_max,
            init_speed=w.init_speed,
        )


def clamp_action(action, v_max: float) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    n = float(np.hypot(a[0], a[1]))
    if n > v_max:
        a = a * (v_max / n)
    return a


def step_robot(state: RobotState, action, grid: OccupancyGrid, v_max: float = 1.0) -> tuple[RobotState, bool]:
    """Advance the robot one step. Returns ``(new_state, blocked)``."""
    a = np.asarray(action, dtype=float)
    if float(np.hypot(a[0], a[1])) > v_max * (1.0 + 1e-9):
        raise ValueError(f"action norm exceeds v_max={v_max}")
    heading = state.heading
    if a[0] != 0.0 or a[1] != 0.0:
        heading = math.atan2(a[1], a[0])
        if heading >= math.pi:
            heading -= 2 * math.pi
    dest = state.position + a
    blocked = not grid.is_free(grid.cell_of(dest))
    position = state.position.copy() if blocked else dest
    return RobotState(position, heading, state.clock + 1), blocked


def target_bounds(grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    """Box of interior cell centres; targets reflect off its faces."""
    lo = np.array([1.0, 1.0]) * grid.resolution
    hi = np.array([grid.width - 2, grid.height - 2], dtype=float) * grid.resolution
    return lo, hi


def step_targets(targets: list[TargetState], config: WorldConfig, rng: np.random.Generator, grid: OccupancyGrid) -> list[TargetState]:
    lo, hi = target_bounds(grid)
    out = []
    for t in targets:
        w = config.q_sqrt @ rng.standard_normal(2)
        vel = t.velocity + w
        pos = t.position + vel
        for ax in range(2):
            if pos[ax] < lo[ax]:
                pos[ax] = lo[ax]
                vel[ax] = abs(vel[ax])
            elif pos[ax] > hi[ax]:
                pos[ax] = hi[ax]
                vel[ax] = -abs(vel[ax])
        out.append(TargetState(pos, vel, t.id))
    return out


def sense(robot: RobotState, targets: list[TargetState], config: WorldConfig, rng: np.random.Generator) -> list[Measurement]:
    """Disc-FoV sensor. Noise is drawn for every target each call so the
    sensor stream stays aligned across different robot trajectories."""
    out = []
    for t in targets:
        eta = config.r_sqrt @ rng.standard_normal(config.R.shape[0])
        if float(np.hypot(*(t.position - robot.position))) <= config.fov_radius:
            out.append(Measurement(t.id, config.H @ t.state + eta, robot.clock))
    return out


def _line_cells(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    # Bresenham, inclusive of both ends
    cells = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        cells.append((x, y))
        if x == x1 and y == y1:
            return cells
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


class Visibility:
    """Line-of-sight visible cells within the FoV disc, cached per robot cell."""

    def __init__(self, grid: OccupancyGrid, fov_radius: float):
        self.grid = grid
        r = fov_radius / grid.resolution
        k = int(math.floor(r))
        offs = [(dx, dy) for dy in range(-k, k + 1) for dx in range(-k, k + 1) if dx * dx + dy * dy <= r * r + 1e-9]
        self.offsets = offs
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def visible(self, cell) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(cell)
        if hit is not None:
            return hit
        g = self.grid
        x0, y0 = cell
        xs, ys = [], []
        for dx, dy in self.offsets:
            x1, y1 = x0 + dx, y0 + dy
            if not g.in_bounds((x1, y1)):
                continue
            ray = _line_cells(x0, y0, x1, y1)
            if all(g.cells[y, x] != OCCUPIED for x, y in ray[1:-1]):
                xs.append(x1)
                ys.append(y1)
        hit = (np.array(ys, dtype=np.intp), np.array(xs, dtype=np.intp))
        self._cache[cell] = hit
        return hit


def update_egocentric_map(agent_grid: OccupancyGrid, robot: RobotState, ground_truth: OccupancyGrid,
                          config: WorldConfig, visibility: Visibility | None = None) -> OccupancyGrid:
    if agent_grid.cells.shape != ground_truth.cells.shape:
        raise ValueError("agent grid and ground truth differ in shape")
    vis = visibility or Visibility(ground_truth, config.fov_radius)
    ys, xs = vis.visible(ground_truth.cell_of(robot.position))
    out = agent_grid.copy()
    out.cells[ys, xs] = ground_truth.cells[ys, xs]
    return out


@dataclass
class WorldState:
    grid: OccupancyGrid
    robot: RobotState
    targets: list[TargetState]

    @property
    def clock(self) -> int:
        return self.robot.clock


def spawn_world(grid: OccupancyGrid, config: WorldConfig, rng: np.random.Generator,
                robot_cell: tuple[int, int] | None = None) -> WorldState:
    """Random robot start (unless given) and targets on distinct free cells."""
    free = grid.free_cells()
    n_lo, n_hi = config.n_targets
    n = int(rng.integers(n_lo, n_hi + 1))
    order = rng.permutation(len(free))
    if robot_cell is None:
        robot_cell = free[int(order[0])]
    picks = [free[int(i)] for i in order if free[int(i)] != robot_cell][:n]
    targets = []
    for j, c in enumerate(picks):
        v = rng.standard_normal(2) * config.init_speed
        targets.append(TargetState(grid.center_of(c), v, j + 1))
    robot = RobotState(grid.center_of(robot_cell), 0.0, 0)
    return WorldState(grid, robot, targets)


def advance(world: WorldState, action, config: WorldConfig, target_rng: np.random.Generator) -> tuple[WorldState, bool]:
    robot, blocked = step_robot(world.robot, action, world.grid, config.v_max)
    targets = step_targets(world.targets, config, target_rng, world.grid)
    return replace(world, robot=robot, targets=targets), blocked
