"""Receding-horizon execution loop: observe, select an expert, generate a
T_pred action sequence, execute the first T_act actions, repeat."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bandit, vbll
from .bandit import SelectionStrategy
from .belief import FilterModel, belief_entropy, filter_step, nll_aggregate, rmse
from .config import Config
from .diffusion import DiffusionPolicy
from .env import (OccupancyGrid, Visibility, WorldConfig, advance, clamp_action, sense, spawn_world,
                  update_egocentric_map)
from .experts import K_EXPERTS, ExpertParams, PlannerState, WorldView, plan, position_trace
from .features import Featurizer, FeatureLayout, ObservationHistory, Snapshot
from .rng import Streams


class SelectorMismatchError(ValueError):
    """Selector and generator disagree about expert conditioning."""


@dataclass(frozen=True)
class HorizonConfig:
    t_obs: int = 2
    t_pred: int = 16
    t_act: int = 8

    def __post_init__(self):
        if min(self.t_obs, self.t_pred, self.t_act) < 1:
            raise ValueError("horizons must be positive")
        if self.t_act > self.t_pred:
            raise ValueError("t_act must not exceed t_pred")

    @classmethod
    def from_config(cls, cfg: Config) -> "HorizonConfig":
        h = cfg.horizon
        return cls(h.t_obs, h.t_pred, h.t_act)


class ReplanContext:
    """Everything a selector or generator may look at when replanning."""

    def __init__(self, step: int, history: ObservationHistory, agent_grid: OccupancyGrid, robot,
                 beliefs, planner_state: PlannerState, featurizer: Featurizer, params: ExpertParams):
        self.step = step
        self.history = history
        self.agent_grid = agent_grid
        self.robot = robot
        self.beliefs = beliefs
        self.planner_state = planner_state
        self.featurizer = featurizer
        self.params = params
        self._raw = None

    @property
    def raw_features(self) -> np.ndarray:
        if self._raw is None:
            self._raw = self.featurizer.raw(self.history)
        return self._raw

    @property
    def features(self) -> np.ndarray:
        return self.featurizer.normalize(self.raw_features)

    def reset_cache(self):
        self._raw = None


# ---------------------------------------------------------------- selectors


class Selector:
    name = "selector"
    conditioned = True
    needs_features = True

    def select(self, ctx: ReplanContext, rng: np.random.Generator) -> tuple[int | None, dict | None]:
        raise NotImplementedError


class FixedSelector(Selector):
    needs_features = False

    def __init__(self, expert: int):
        self.expert = int(expert)
        self.name = f"fixed{self.expert}"

    def select(self, ctx, rng):
        return self.expert, None


class RandomSelector(Selector):
    name = "random"
    needs_features = False

    def __init__(self, n_experts: int = K_EXPERTS):
        self.n_experts = n_experts

    def select(self, ctx, rng):
        return int(rng.integers(1, self.n_experts + 1)), None


class VbllSelector(Selector):
    def __init__(self, heads: list[vbll.VbllHead], strategy: SelectionStrategy,
                 reward_offset=0.0, reward_scale=1.0):
        """``reward_offset``/``reward_scale`` (scalars or one per head) map each
        head's standardised prediction back to reward units."""
        scale = np.broadcast_to(np.asarray(reward_scale, dtype=float), (len(heads),)).copy()
        if not np.all(scale > 0):
            raise ValueError("reward scale must be positive")
        self.heads = heads
        self.strategy = strategy
        self.reward_offset = np.broadcast_to(np.asarray(reward_offset, dtype=float), (len(heads),)).copy()
        self.reward_scale = scale
        self.name = f"vbll-{strategy.kind.value}"
        # heads are frozen at deployment; cache the factors vbll.predict would rebuild
        self._frozen = [(h.mu, h.L, h.noise_var) for h in heads]

    def predictions(self, phi) -> tuple[np.ndarray, np.ndarray]:
        """Per-head mean and std in reward units (same arithmetic as vbll.predict)."""
        x = np.asarray(phi, dtype=float)
        means = np.empty(len(self._frozen))
        var = np.empty(len(self._frozen))
        for i, (mu, L, nv) in enumerate(self._frozen):
            PL = x @ L
            means[i] = x @ mu
            var[i] = np.sum(PL * PL) + nv
        return self.reward_offset + self.reward_scale * means, self.reward_scale * np.sqrt(var)

    def select(self, ctx, rng):
        means, stds = self.predictions(ctx.features)
        k = bandit.select_expert(means, stds, self.strategy, rng)
        return k, {"mean": means.tolist(), "std": stds.tolist()}


class MoeSelector(Selector):
    name = "moe"

    def __init__(self, classifier):
        self.classifier = classifier

    def select(self, ctx, rng):
        return bandit.moe_select(self.classifier, ctx.features), None


class NllRegressSelector(Selector):
    name = "mlp-regress"

    def __init__(self, regressor: bandit.NllRegressor):
        self.regressor = regressor

    def select(self, ctx, rng):
        nll = self.regressor.predict(ctx.features)
        return bandit.mlp_regress_select(self.regressor, ctx.features), {"mean": (-nll).tolist()}


class McDropoutSelector(Selector):
    name = "mc-dropout"

    def __init__(self, head: bandit.DropoutRewardHead, passes: int = 20,
                 strategy: SelectionStrategy = SelectionStrategy("lcb", 1.0)):
        self.head = head
        self.passes = passes
        self.strategy = strategy

    def select(self, ctx, rng):
        mean, var = self.head.predict(ctx.features, self.passes, rng)
        std = np.sqrt(var)
        return bandit.select_expert(mean, std, self.strategy), {"mean": mean.tolist(), "std": std.tolist()}


class UnconditionedSelector(Selector):
    name = "unconditioned"
    conditioned = False
    needs_features = False

    def select(self, ctx, rng):
        return None, None


# ---------------------------------------------------------------- generators


class Generator:
    conditioned = True

    def generate(self, ctx: ReplanContext, expert: int | None, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class RuleGenerator(Generator):
    """Calls the rule-based planner of the selected expert."""

    def generate(self, ctx, expert, rng):
        view = WorldView(ctx.agent_grid, ctx.robot, ctx.params)
        return plan(expert, view, ctx.beliefs, ctx.planner_state)


class LearnedGenerator(Generator):
    def __init__(self, policy: DiffusionPolicy):
        self.policy = policy
        self.conditioned = policy.conditioned

    def generate(self, ctx, expert, rng):
        return self.policy.sample(ctx.features, expert if self.conditioned else None, rng)


class ScriptedGenerator(Generator):
    def __init__(self, fn: Callable[[ReplanContext, int | None], np.ndarray], conditioned: bool = True):
        self.fn = fn
        self.conditioned = conditioned

    def generate(self, ctx, expert, rng):
        return np.asarray(self.fn(ctx, expert), dtype=float)


def check_pairing(selector: Selector, generator: Generator):
    if selector.conditioned != generator.conditioned:
        raise SelectorMismatchError(
            f"selector {selector.name!r} conditioned={selector.conditioned} paired with a generator "
            f"conditioned={generator.conditioned}")


@dataclass
class ReplanRecord:
    step: int
    expert: int | None
    actions: np.ndarray
    preds: dict | None = None
    raw_features: np.ndarray | None = None


def replan(ctx: ReplanContext, selector: Selector, generator: Generator,
           selector_rng: np.random.Generator, policy_rng: np.random.Generator, t_pred: int) -> ReplanRecord:
    expert, preds = selector.select(ctx, selector_rng)
    actions = generator.generate(ctx, expert, policy_rng)
    actions = np.asarray(actions, dtype=float).reshape(-1, 2)
    if actions.shape[0] != t_pred:
        raise ValueError(f"generator returned {actions.shape[0]} actions, expected {t_pred}")
    return ReplanRecord(ctx.step, expert, actions, preds)


# ---------------------------------------------------------------- episodes


def reward_target(nll_series) -> float | None:
    """Negative mean of the non-missing NLLs; None when every step is missing."""
    vals = [float(v) for v in nll_series if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None
    return -sum(vals) / len(vals)


@dataclass
class Window:
    step: int
    raw_features: np.ndarray
    actions: np.ndarray
    expert: int
    reward: float  # NaN when no NLL was available over the window


@dataclass
class EpisodeResult:
    seed: int
    steps: list = field(default_factory=list)  # per-step dicts
    replans: list = field(default_factory=list)  # ReplanRecord
    executed: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    latency_s: list = field(default_factory=list)  # wall time per replan; never serialised in traces
    windows: list = field(default_factory=list)

    def _mean(self, key: str) -> float:
        vals = [s[key] for s in self.steps if s[key] is not None]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_nll(self) -> float:
        return self._mean("nll")

    @property
    def mean_rmse(self) -> float:
        return self._mean("rmse")

    @property
    def mean_entropy(self) -> float:
        return self._mean("entropy")

    @property
    def coverage(self) -> float:
        if not self.steps:
            return 0.0
        return sum(s["nll"] is not None for s in self.steps) / len(self.steps)

    def expert_histogram(self, n_experts: int = K_EXPERTS) -> list[int]:
        h = [0] * n_experts
        for r in self.replans:
            if r.expert is not None:
                h[r.expert - 1] += 1
        return h


@dataclass
class EpisodeSetup:
    grid: OccupancyGrid
    world: WorldConfig
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    model: FilterModel | None = None
    featurizer: Featurizer | None = None
    params: ExpertParams | None = None

    def __post_init__(self):
        if self.model is None:
            self.model = FilterModel.constant_velocity(self.world)
        if self.featurizer is None:
            self.featurizer = Featurizer(FeatureLayout(fov_radius=self.world.fov_radius))
        if self.params is None:
            self.params = ExpertParams(fov_radius=self.world.fov_radius, v_max=self.world.v_max,
                                       t_pred=self.horizon.t_pred)
        self.visibility = Visibility(self.grid, self.world.fov_radius)

    @classmethod
    def from_config(cls, cfg: Config, grid: OccupancyGrid, featurizer: Featurizer | None = None) -> "EpisodeSetup":
        world = WorldConfig.from_config(cfg)
        return cls(grid, world, HorizonConfig.from_config(cfg), FilterModel.from_config(cfg, world),
                   featurizer or Featurizer(FeatureLayout.from_config(cfg)), ExpertParams.from_config(cfg))


def _target_summary(targets, beliefs) -> list:
    out = []
    for t in targets:
        b = beliefs.get(t.id)
        row = {"id": t.id, "truth": [float(v) for v in t.position]}
        if b is not None:
            row["mean"] = [float(v) for v in b.mean[:2]]
            row["trace"] = position_trace(b)
        out.append(row)
    return out


def run_episode(setup: EpisodeSetup, selector: Selector, generator: Generator, seed: int,
                collect: bool = False, episode_length: int | None = None) -> EpisodeResult:
    """Run one episode. Deterministic given ``seed``; world, targets and
    sensor draw from streams that do not depend on the robot's behaviour."""
    check_pairing(selector, generator)
    L = setup.world.episode_length if episode_length is None else episode_length
    hz = setup.horizon
    streams = Streams(seed)
    grid = setup.grid
    world = spawn_world(grid, setup.world, streams["init"])
    agent = update_egocentric_map(grid.unknown_like(), world.robot, grid, setup.world, setup.visibility)
    meas = sense(world.robot, world.targets, setup.world, streams["sensor"])
    beliefs = filter_step({}, meas, setup.model, 0)
    pstate = PlannerState.for_grid(grid)
    detected = [m.target_id for m in meas]
    pstate.observe(0, grid.cell_of(world.robot.position), detected, beliefs, setup.params.tau_track)
    history = ObservationHistory(hz.t_obs)
    history.push(Snapshot(0, agent, world.robot.position.copy(), beliefs, frozenset(detected), pstate.visits.copy()))

    result = EpisodeResult(seed=seed)
    executed = np.zeros((L, 2))
    current: ReplanRecord | None = None
    for t in range(L):
        if t % hz.t_act == 0:
            ctx = ReplanContext(t, history, agent, world.robot, beliefs, pstate, setup.featurizer, setup.params)
            t0 = time.perf_counter()
            current = replan(ctx, selector, generator, streams["selector"], streams["policy"], hz.t_pred)
            result.latency_s.append(time.perf_counter() - t0)
            if collect:
                current.raw_features = ctx.raw_features
            result.replans.append(current)
        a = clamp_action(current.actions[t - current.step], setup.world.v_max)
        executed[t] = a
        world, blocked = advance(world, a, setup.world, streams["targets"])
        agent = update_egocentric_map(agent, world.robot, grid, setup.world, setup.visibility)
        step = t + 1
        meas = sense(world.robot, world.targets, setup.world, streams["sensor"])
        beliefs = filter_step(beliefs, meas, setup.model, step)
        detected = [m.target_id for m in meas]
        pstate.observe(step, grid.cell_of(world.robot.position), detected, beliefs, setup.params.tau_track)
        history.push(Snapshot(step, agent, world.robot.position.copy(), beliefs, frozenset(detected),
                              pstate.visits.copy()))
        result.steps.append({
            "step": step,
            "robot": [float(v) for v in world.robot.position],
            "blocked": bool(blocked),
            "expert": current.expert,
            "detected": sorted(detected),
            "nll": nll_aggregate(beliefs, world.targets),
            "rmse": rmse(beliefs, world.targets),
            "entropy": belief_entropy(beliefs),
            "targets": _target_summary(world.targets, beliefs),
        })
    result.executed = executed
    if collect:
        result.windows = episode_windows(result, hz)
    return result


def episode_windows(result: EpisodeResult, hz: HorizonConfig) -> list[Window]:
    """(features, next-T_pred executed actions, expert, reward) per replan
    whose full prediction horizon lies inside the episode."""
    L = len(result.steps)
    nll = [s["nll"] for s in result.steps]
    out = []
    for r in result.replans:
        tau = r.step
        if tau + hz.t_pred > L:
            continue
        rew = reward_target(nll[tau : tau + hz.t_act])
        out.append(Window(tau, r.raw_features, result.executed[tau : tau + hz.t_pred].copy(), int(r.expert),
                          math.nan if rew is None else rew))
    return out


def trace_lines(result: EpisodeResult) -> list[str]:
    """Line-delimited JSON audit trace (no wall-clock data, so it is reproducible)."""
    by_step = {r.step: r for r in result.replans}
    lines = [json.dumps({"kind": "episode", "seed": result.seed, "steps": len(result.steps),
                         "replans": len(result.replans)}, sort_keys=True)]
    for s in result.steps:
        rec = dict(s)
        r = by_step.get(s["step"] - 1)
        if r is not None:
            rec["replan"] = {"expert": r.expert, "preds": r.preds}
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


# ---------------------------------------------------------------- latency


def latency_stats(seconds: list[float], t_act: int, select_seconds: list[float] | None = None) -> dict:
    ms = np.asarray(seconds, dtype=float) * 1000.0 / t_act
    out = {"median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)),
           "mean_ms": float(ms.mean()), "cv": float(ms.std() / ms.mean()) if ms.mean() > 0 else 0.0,
           "n": int(ms.size)}
    if select_seconds:
        out["select_median_ms"] = float(np.median(select_seconds)) * 1000.0 / t_act
    return out


def measure_replan_latency(pipelines: dict[str, tuple[Selector, Generator]], contexts: list[ReplanContext],
                           n_trials: int, t_act: int, t_pred: int, seed: int = 0, warmup: int = 3) -> dict:
    """Median and p95 wall time of one full replan (encode, select, generate)
    per executed step. Pipelines are interleaved trial by trial, in an order
    rotated every trial, so drift in machine load and cache effects from
    the previous pipeline affect all of them alike.

    For selectors that read features, the selection stage alone is also
    timed on the already encoded context (``select_median_ms``), with a
    throwaway generator so the timed replans keep their draws."""
    if not contexts:
        raise ValueError("need at least one replan context")
    for sel, gen in pipelines.values():
        check_pairing(sel, gen)
    rngs = {name: (np.random.default_rng([seed, i, 0]), np.random.default_rng([seed, i, 1]))
            for i, name in enumerate(pipelines)}
    samples = {name: [] for name in pipelines}
    select_samples = {name: [] for name in pipelines}
    spare = np.random.default_rng([seed, 2**32])
    for trial in range(warmup + n_trials):
        ctx = contexts[trial % len(contexts)]
        names = list(pipelines)
        shift = trial % len(names)
        for name in names[shift:] + names[:shift]:
            sel, gen = pipelines[name]
            ctx.reset_cache()
            saved = ctx.planner_state
            ctx.planner_state = saved.copy()
            t0 = time.perf_counter()
            replan(ctx, sel, gen, rngs[name][0], rngs[name][1], t_pred)
            dt = time.perf_counter() - t0
            ctx.planner_state = saved
            if trial < warmup:
                continue
            samples[name].append(dt)
            if sel.needs_features:
                t0 = time.perf_counter()
                sel.select(ctx, spare)
                select_samples[name].append(time.perf_counter() - t0)
    return {name: latency_stats(v, t_act, select_samples[name]) for name, v in samples.items()}


def selection_overhead(stats: dict, name: str, base: str) -> float:
    """Selection-stage time of pipeline `name` as a fraction of the full
    replan time of `base`."""
    return stats[name]["select_median_ms"] / stats[base]["median_ms"]


def capture_contexts(setup: EpisodeSetup, seed: int, every: int, count: int) -> list[ReplanContext]:
    """Replan contexts from a rule-driven episode, for latency fixtures."""
    captured: list[ReplanContext] = []

    class _Capture(Generator):
        def generate(self, ctx, expert, rng):
            if ctx.step % every == 0 and len(captured) < count:
                captured.append(ReplanContext(ctx.step, _copy_history(ctx.history), ctx.agent_grid, ctx.robot,
                                              ctx.beliefs, ctx.planner_state.copy(), ctx.featurizer, ctx.params))
            return RuleGenerator().generate(ctx, expert, rng)

    run_episode(setup, FixedSelector(1), _Capture(), seed, episode_length=every * count)
    return captured


def _copy_history(h: ObservationHistory) -> ObservationHistory:
    out = ObservationHistory(h.t_obs)
    for s in h.snapshots:
        out._buf.append(s)
    return out
