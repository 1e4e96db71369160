"""Rule-based expert planners: frontier exploration, uncertainty-triggered
reacquisition and timed tracking."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .belief import BeliefSet
from .config import Config
from .env import FREE, UNKNOWN, OccupancyGrid, RobotState

SQRT2 = math.sqrt(2.0)
# fixed neighbour order; diagonals last
_NEIGHBOURS = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
               (1, 1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (-1, -1, SQRT2))


class ExpertId(IntEnum):
    EXPLORE = 1
    REACQ = 2
    TRACK = 3


K_EXPERTS = len(ExpertId)
EXPERT_LABELS = {ExpertId.EXPLORE: "Explore", ExpertId.REACQ: "Reacq", ExpertId.TRACK: "Track"}


class Mode(IntEnum):
    EXPLORE = 0
    TRACK = 1


@dataclass
class ExpertParams:
    w_gain: float = 1.0
    w_dist: float = 0.5
    w_visit: float = 0.2
    tau_unc: float = 25.0
    tau_track: int = 30
    fov_radius: float = 5.0
    v_max: float = 1.0
    t_pred: int = 16

    @classmethod
    def from_config(cls, cfg: Config) -> "ExpertParams":
        e = cfg.experts
        return cls(e.w_gain, e.w_dist, e.w_visit, e.tau_unc, e.tau_track,
                   cfg.world.fov_radius, cfg.world.v_max, cfg.horizon.t_pred)


@dataclass
class PlannerState:
    visits: np.ndarray
    mode: Mode = Mode.EXPLORE
    mode_entry: int = 0
    tracked_id: int | None = None
    prev_detected: frozenset = frozenset()
    path: list = field(default_factory=list)

    @classmethod
    def for_grid(cls, grid: OccupancyGrid) -> "PlannerState":
        return cls(np.zeros(grid.cells.shape, dtype=np.int64))

    def copy(self) -> "PlannerState":
        return PlannerState(self.visits.copy(), self.mode, self.mode_entry, self.tracked_id,
                            self.prev_detected, list(self.path))

    def observe(self, step: int, robot_cell, detected_ids, beliefs: BeliefSet, tau_track: int):
        """Per-step bookkeeping: visitation counts and the timed-track FSM."""
        x, y = robot_cell
        self.visits[y, x] += 1
        detected = frozenset(detected_ids)
        if self.mode == Mode.TRACK and step - self.mode_entry >= tau_track:
            self.mode = Mode.EXPLORE
            self.tracked_id = None
        fresh = detected - self.prev_detected
        if self.mode == Mode.EXPLORE and fresh:
            # first-detected target among the new ones, ties to lowest id
            def first_seen(tid):
                b = beliefs.get(tid)
                first = b.first_detected if b is not None and b.first_detected is not None else step
                return (first, tid)
            self.mode = Mode.TRACK
            self.mode_entry = step
            self.tracked_id = min(fresh, key=first_seen)
        self.prev_detected = detected


@dataclass
class Frontier:
    cells: list  # (x, y) tuples
    centroid: np.ndarray
    goal: tuple  # member cell nearest the centroid


def detect_frontiers(agent_grid: OccupancyGrid) -> list[Frontier]:
    """Free cells 4-adjacent to Unknown, grouped into 8-connected clusters."""
    c = agent_grid.cells
    unknown = c == UNKNOWN
    near = np.zeros_like(unknown)
    near[1:, :] |= unknown[:-1, :]
    near[:-1, :] |= unknown[1:, :]
    near[:, 1:] |= unknown[:, :-1]
    near[:, :-1] |= unknown[:, 1:]
    mask = (c == FREE) & near
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    out = []
    for lab in range(1, n + 1):
        ys, xs = np.nonzero(labels == lab)
        centroid = np.array([xs.mean(), ys.mean()]) * agent_grid.resolution
        d2 = (xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2
        idx = ys * agent_grid.width + xs
        best = np.lexsort((idx, d2))[0]
        cells = [(int(x), int(y)) for x, y in zip(xs, ys)]
        out.append(Frontier(cells, centroid, (int(xs[best]), int(ys[best]))))
    out.sort(key=lambda f: agent_grid.index(f.goal))
    return out


def dijkstra(grid: OccupancyGrid, source, target=None) -> tuple[np.ndarray, np.ndarray]:
    """8-connected Euclidean-cost search over Free cells, no corner cutting.

    Returns flat ``(dist, parent)`` arrays; unreachable cells have inf / -1.
    Equal-cost predecessors resolve to the lowest cell index.
    """
    W, H = grid.width, grid.height
    free = (grid.cells == FREE).ravel()
    n = W * H
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    s = grid.index(source)
    t = None if target is None else grid.index(target)
    dist[s] = 0.0
    heap = [(0.0, s)]
    distl = dist.tolist()
    parl = parent.tolist()
    freel = free.tolist()
    donel = done.tolist()
    while heap:
        d, u = heapq.heappop(heap)
        if donel[u]:
            continue
        donel[u] = True
        if u == t:
            break
        ux, uy = u % W, u // W
        for dx, dy, cost in _NEIGHBOURS:
            vx, vy = ux + dx, uy + dy
            if vx < 0 or vy < 0 or vx >= W or vy >= H:
                continue
            v = vy * W + vx
            if not freel[v] or donel[v]:
                continue
            if dx and dy and not (freel[uy * W + vx] and freel[vy * W + ux]):
                continue
            nd = d + cost
            if nd < distl[v] - 1e-12 or (abs(nd - distl[v]) <= 1e-12 and u < parl[v]):
                distl[v] = nd
                parl[v] = u
                heapq.heappush(heap, (nd, v))
    return np.array(distl), np.array(parl, dtype=np.int64)


def _trace_path(grid: OccupancyGrid, parent: np.ndarray, source, goal) -> list:
    s, g = grid.index(source), grid.index(goal)
    if g != s and parent[g] < 0:
        return []
    out = [g]
    while out[-1] != s:
        out.append(int(parent[out[-1]]))
    return [grid.cell_at(i) for i in reversed(out)]


def shortest_path(agent_grid: OccupancyGrid, start, goal) -> list:
    for name, c in (("start", start), ("goal", goal)):
        if not agent_grid.is_free(c):
            raise ValueError(f"{name} cell {c} is not Free")
    _, parent = dijkstra(agent_grid, start, goal)
    return _trace_path(agent_grid, parent, start, goal)


def path_cost(path: list) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:]))


def coverage_gain(agent_grid: OccupancyGrid, point, radius: float) -> int:
    """Unknown cells within ``radius`` of ``point`` (grid units)."""
    px, py = np.asarray(point, dtype=float) / agent_grid.resolution
    r = radius / agent_grid.resolution
    x0, x1 = max(0, int(math.floor(px - r))), min(agent_grid.width - 1, int(math.ceil(px + r)))
    y0, y1 = max(0, int(math.floor(py - r))), min(agent_grid.height - 1, int(math.ceil(py + r)))
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    inside = (xs - px) ** 2 + (ys - py) ** 2 <= r * r + 1e-9
    return int(np.count_nonzero(inside & (agent_grid.cells[y0 : y1 + 1, x0 : x1 + 1] == UNKNOWN)))


class WorldView:
    """What a planner sees at a replan: agent map, robot pose, and a lazily
    computed distance field from the robot cell."""

    def __init__(self, agent_grid: OccupancyGrid, robot: RobotState, params: ExpertParams):
        self.grid = agent_grid
        self.robot = robot
        self.params = params
        self.robot_cell = agent_grid.cell_of(robot.position)
        self._field = None

    @property
    def field(self):
        if self._field is None:
            g = self.grid
            if not g.is_free(self.robot_cell):
                # robot cell not yet marked free: treat it as free for search
                g = g.copy()
                g.cells[self.robot_cell[1], self.robot_cell[0]] = FREE
            self._field = dijkstra(g, self.robot_cell)
        return self._field

    def distance(self, cell) -> float:
        return float(self.field[0][self.grid.index(cell)])

    def path_to(self, cell) -> list:
        return _trace_path(self.grid, self.field[1], self.robot_cell, cell)

    def snap(self, point) -> tuple | None:
        """Reachable free cell nearest (Euclidean) to ``point``; ties to lowest index."""
        dist = self.field[0]
        reach = np.flatnonzero(np.isfinite(dist))
        if reach.size == 0:
            return None
        W = self.grid.width
        p = np.asarray(point, dtype=float) / self.grid.resolution
        d2 = (reach % W - p[0]) ** 2 + (reach // W - p[1]) ** 2
        best = reach[np.lexsort((reach, d2))[0]]
        return self.grid.cell_at(int(best))


def score_frontier(frontier: Frontier, view: WorldView, state: PlannerState) -> float:
    p = view.params
    gain = coverage_gain(view.grid, frontier.centroid, p.fov_radius)
    dist = view.distance(frontier.goal)
    visits = int(state.visits[frontier.goal[1], frontier.goal[0]])
    return p.w_gain * gain - p.w_dist * dist - p.w_visit * visits


def path_to_actions(path: list, robot: RobotState, grid: OccupancyGrid, v_max: float, length: int) -> np.ndarray:
    """Walk the polyline robot -> path cell centres at speed v_max; pad with zeros."""
    pts = [np.asarray(robot.position, dtype=float)] + [grid.center_of(c) for c in path]
    actions = np.zeros((length, 2))
    cur = pts[0].copy()
    seg = 1
    for k in range(length):
        budget = v_max
        start = cur.copy()
        while seg < len(pts) and budget > 1e-12:
            d = pts[seg] - cur
            n = float(np.hypot(d[0], d[1]))
            if n <= budget:
                cur = pts[seg].copy()
                budget -= n
                seg += 1
            else:
                cur = cur + d * (budget / n)
                budget = 0.0
        actions[k] = cur - start
    return actions


def _goto(view: WorldView, cell, state: PlannerState) -> np.ndarray:
    p = view.params
    path = view.path_to(cell) if cell is not None else []
    state.path = path
    return path_to_actions(path, view.robot, view.grid, p.v_max, p.t_pred)


def patrol_goal(view: WorldView, state: PlannerState):
    dist = view.field[0]
    reach = np.flatnonzero(np.isfinite(dist))
    reach = reach[reach != view.grid.index(view.robot_cell)]
    if reach.size == 0:
        return None
    counts = state.visits.ravel()[reach]
    best = reach[np.lexsort((reach, counts))[0]]
    return view.grid.cell_at(int(best))


def choose_frontier(view: WorldView, state: PlannerState) -> Frontier | None:
    best, best_score = None, -math.inf
    for f in detect_frontiers(view.grid):
        if not math.isfinite(view.distance(f.goal)):
            continue
        s = score_frontier(f, view, state)
        if s > best_score:
            best, best_score = f, s
    return best


def plan_explore(view: WorldView, state: PlannerState) -> np.ndarray:
    f = choose_frontier(view, state)
    goal = f.goal if f is not None else patrol_goal(view, state)
    return _goto(view, goal, state)


def position_trace(belief) -> float:
    return float(np.trace(belief.cov[:2, :2]))


def plan_uncertainty_hybrid(view: WorldView, beliefs: BeliefSet, state: PlannerState) -> np.ndarray:
    tau = view.params.tau_unc
    worst, worst_tr = None, tau
    for tid in sorted(beliefs):
        tr = position_trace(beliefs[tid])
        if tr > worst_tr:
            worst, worst_tr = tid, tr
    if worst is None:
        return plan_explore(view, state)
    return _goto(view, view.snap(beliefs[worst].mean[:2]), state)


def plan_time_hybrid(view: WorldView, beliefs: BeliefSet, state: PlannerState) -> np.ndarray:
    if state.mode == Mode.TRACK and state.tracked_id in beliefs:
        return _goto(view, view.snap(beliefs[state.tracked_id].mean[:2]), state)
    return plan_explore(view, state)


def plan(expert: int, view: WorldView, beliefs: BeliefSet, state: PlannerState) -> np.ndarray:
    k = ExpertId(int(expert))
    if k == ExpertId.EXPLORE:
        return plan_explore(view, state)
    if k == ExpertId.REACQ:
        return plan_uncertainty_hybrid(view, beliefs, state)
    return plan_time_hybrid(view, beliefs, state)
