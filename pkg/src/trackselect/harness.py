"""End-to-end orchestration: demonstration collection, two-stage training,
evaluation over the method matrix, ablations and reporting."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bandit, serialize, vbll
from .bandit import SelectionStrategy, TrainConfig
from .config import Config
from .controller import (EpisodeResult, EpisodeSetup, FixedSelector, Generator, LearnedGenerator,
                         McDropoutSelector, MoeSelector, NllRegressSelector, RandomSelector, RuleGenerator,
                         Selector, UnconditionedSelector, VbllSelector, run_episode, trace_lines)
from .diffusion import DiffusionPolicy, fit_policy, make_schedule
from .env import OccupancyGrid, load_map
from .experts import EXPERT_LABELS, K_EXPERTS, ExpertId
from .features import Featurizer, FeatureLayout, Normalizer
from .nn import Mlp
from .rng import Streams

log = logging.getLogger(__name__)

VERSION = "0.1.0"


class ConfigurationError(ValueError):
    pass


def episode_seeds(seed: int, prefix: str, n: int) -> list[int]:
    s = Streams(seed)
    return [s.child_seed(f"{prefix}{i}") for i in range(n)]


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    raw_features: np.ndarray  # (N, d)
    actions: np.ndarray  # (N, T_pred, 2)
    experts: np.ndarray  # (N,) 1-based
    rewards: np.ndarray  # (N,) NaN when the window had no NLL
    episodes: np.ndarray
    steps: np.ndarray
    manifest: dict
    config_text: str = ""

    def __len__(self):
        return len(self.experts)

    @property
    def featurizer(self) -> Featurizer:
        return Featurizer.from_manifest(self.manifest)

    @property
    def features(self) -> np.ndarray:
        return self.featurizer.normalize(self.raw_features)

    def index_sets(self, n_experts: int = K_EXPERTS) -> dict[int, np.ndarray]:
        return {k: np.flatnonzero(self.experts == k) for k in range(1, n_experts + 1)}

    def rewarded(self) -> np.ndarray:
        return np.isfinite(self.rewards)

    def to_bytes(self) -> bytes:
        arrays = {"raw_features": self.raw_features, "actions": self.actions, "experts": self.experts,
                  "rewards": self.rewards, "episodes": self.episodes, "steps": self.steps}
        return serialize.dumps(arrays, {"kind": "dataset", "manifest": self.manifest, "config": self.config_text})

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        arrays, meta = serialize.load(path)
        if meta.get("kind") != "dataset":
            raise serialize.ContainerError("not a dataset file")
        return cls(arrays["raw_features"], arrays["actions"], arrays["experts"], arrays["rewards"],
                   arrays["episodes"], arrays["steps"], meta["manifest"], meta["config"])


def grid_for(cfg: Config) -> OccupancyGrid:
    return load_map(cfg.world.map)


def collect_demos(cfg: Config, n_episodes: int | None = None, seed: int | None = None,
                  grid: OccupancyGrid | None = None) -> Dataset:
    """Run the rule-based experts in rotation and slice every episode into
    (features, next-T_pred actions, expert, reward) windows."""
    n = cfg.harness.demo_episodes if n_episodes is None else n_episodes
    seed = cfg.seed if seed is None else seed
    grid = grid or grid_for(cfg)
    layout = FeatureLayout.from_config(cfg)
    setup = EpisodeSetup.from_config(cfg, grid, Featurizer(layout))
    feats, acts, experts, rewards, eps, steps = [], [], [], [], [], []
    for e, s in enumerate(episode_seeds(seed, "demo", n)):
        k = e % K_EXPERTS + 1
        try:
            res = run_episode(setup, FixedSelector(k), RuleGenerator(), s, collect=True)
        except Exception as exc:  # an expert failing mid-episode drops the episode
            log.warning("demo episode %d (expert %d) dropped: %s", e, k, exc)
            continue
        for w in res.windows:
            feats.append(w.raw_features)
            acts.append(w.actions)
            experts.append(w.expert)
            rewards.append(w.reward)
            eps.append(e)
            steps.append(w.step)
    d = layout.dim
    raw = np.array(feats, dtype=float).reshape(-1, d)
    norm = Normalizer.fit(raw, layout) if len(raw) else Normalizer.identity(d)
    manifest = Featurizer(layout, norm).manifest()
    return Dataset(raw, np.array(acts, dtype=float).reshape(-1, cfg.horizon.t_pred, 2),
                   np.array(experts, dtype=np.int64), np.array(rewards, dtype=float),
                   np.array(eps, dtype=np.int64), np.array(steps, dtype=np.int64), manifest, cfg.dumps())


# ---------------------------------------------------------------- training


def train_policy(dataset: Dataset, cfg: Config, conditioned: bool = True, seed: int | None = None,
                 epochs: int | None = None) -> tuple[DiffusionPolicy, list[float]]:
    if len(dataset) == 0:
        raise ConfigurationError("cannot train a policy on an empty dataset")
    p = cfg.policy
    seed = cfg.seed if seed is None else seed
    rng = Streams(seed)["train-policy" if conditioned else "train-policy-uncond"]
    policy = DiffusionPolicy(cfg.horizon.t_pred, 2, dataset.raw_features.shape[1], K_EXPERTS if conditioned else None,
                             p.d_e, make_schedule(p.i_diff, p.beta_start, p.beta_end), p.hidden, p.time_dim, rng,
                             dataset.manifest["hash"])
    policy.manifest = dataset.manifest
    curve = fit_policy(policy, dataset.actions, dataset.features, dataset.experts if conditioned else None,
                       p.epochs if epochs is None else epochs, p.batch_size, p.lr, rng)
    return policy, curve


@dataclass
class SelectorBundle:
    heads: list
    classifier: Mlp
    regressor: bandit.NllRegressor
    dropout_head: bandit.DropoutRewardHead
    manifest: dict
    fit_info: dict = field(default_factory=dict)
    # head k regresses (r - offset_k) / scale_k on its own expert's rewards
    reward_norm: list = field(default_factory=list)

    def vbll_selector(self, strategy: SelectionStrategy) -> VbllSelector:
        if not self.reward_norm:
            return VbllSelector(self.heads, strategy)
        off, scale = np.array(self.reward_norm, dtype=float).T
        return VbllSelector(self.heads, strategy, off, scale)

    def save(self, path: str | Path, prior_var: float = 1.0):
        arrays: dict[str, np.ndarray] = {}
        vmeta = vbll.save_heads(arrays, self.heads, self.manifest["hash"], prior_var)
        arrays.update(self.classifier.state_dict("moe."))
        arrays.update(self.regressor.net.state_dict("reg."))
        arrays.update(self.dropout_head.net.state_dict("mcd."))
        meta = {"kind": "selector", "vbll": vmeta, "manifest": self.manifest,
                "moe": self.classifier.spec(), "reg": self.regressor.net.spec(), "mcd": self.dropout_head.net.spec(),
                "reg_norm": [self.regressor.offset, self.regressor.scale],
                "mcd_norm": [self.dropout_head.offset, self.dropout_head.scale],
                "reward_norm": [list(map(float, p)) for p in self.reward_norm]}
        serialize.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SelectorBundle":
        arrays, meta = serialize.load(path)
        if meta.get("kind") != "selector":
            raise serialize.ContainerError("not a selector checkpoint")
        v = meta["vbll"]
        if v["feature_hash"] != meta["manifest"]["hash"]:
            raise serialize.ContainerError("VBLL heads trained against a different feature manifest")
        heads = vbll.heads_from_arrays(arrays, v["K"], v["d"])
        nets = {}
        for key in ("moe", "reg", "mcd"):
            net = Mlp.from_spec(meta[key])
            serialize.check_manifest(arrays, {k: p.shape for k, p in net.state_dict(f"{key}.").items()})
            net.load_state_dict(arrays, f"{key}.")
            nets[key] = net
        return cls(heads, nets["moe"], bandit.NllRegressor(nets["reg"], *meta["reg_norm"]),
                   bandit.DropoutRewardHead(nets["mcd"], *meta["mcd_norm"]), meta["manifest"],
                   reward_norm=[tuple(p) for p in meta["reward_norm"]])


def train_selector(dataset: Dataset, cfg: Config, seed: int | None = None) -> SelectorBundle:
    """VBLL heads (each on its own expert's windows) plus the MoE classifier,
    NLL regressor and MC-dropout baselines on the same features."""
    ok = dataset.rewarded()
    phi = dataset.features[ok]
    r = dataset.rewards[ok]
    k = dataset.experts[ok]
    for j in range(1, K_EXPERTS + 1):
        if not np.any(k == j):
            raise ConfigurationError(f"no rewarded samples for expert {j}")
    seed = cfg.seed if seed is None else seed
    streams = Streams(seed)
    # per-expert standardisation keeps each head a function of its own samples only
    norm, rs = [], np.empty_like(r)
    for j in range(1, K_EXPERTS + 1):
        sel = k == j
        off, sc = float(r[sel].mean()), float(r[sel].std()) or 1.0
        norm.append((off, sc))
        rs[sel] = (r[sel] - off) / sc
    heads, info = vbll.fit(phi, rs, k, K_EXPERTS, vbll.FitConfig.from_config(cfg))
    s = cfg.selector
    tc = TrainConfig(tuple(s.hidden), s.epochs, s.lr, 256, s.dropout)
    clf = bandit.train_classifier(phi, k, K_EXPERTS, tc, streams["train-moe"])
    reg = bandit.train_nll_regressor(phi, -r, k, K_EXPERTS, tc, streams["train-reg"])
    mcd = bandit.train_dropout_head(phi, r, k, K_EXPERTS, tc, streams["train-mcd"])
    return SelectorBundle(heads, clf, reg, mcd, dataset.manifest,
                          {"epochs": info["epochs"], "grad_norm": info["grad_norm"]}, norm)


# ---------------------------------------------------------------- evaluation


@dataclass
class Method:
    name: str
    category: str
    selector: Selector
    generator: Generator


RULE = "rule-based"
FIXED = "fixed & deterministic"
UNCERTAIN = "uncertainty-aware"
CATEGORIES = (RULE, FIXED, UNCERTAIN)


@dataclass
class Models:
    policy: DiffusionPolicy | None = None
    policy_uncond: DiffusionPolicy | None = None
    bundle: SelectorBundle | None = None


def vbll_strategy(cfg: Config, kind: str | None = None, lam: float | None = None) -> SelectionStrategy:
    return SelectionStrategy(kind or cfg.selector.strategy, cfg.selector.lam if lam is None else lam)


def method_matrix(cfg: Config, models: Models) -> list[Method]:
    """Every evaluated method; learned ones are skipped (with a warning)
    when their checkpoint is missing."""
    rule = RuleGenerator()
    out = [Method(f"{EXPERT_LABELS[e]}-rule", RULE, FixedSelector(e), rule) for e in ExpertId]
    out.append(Method("Random-rule", RULE, RandomSelector(K_EXPERTS), rule))
    b = models.bundle
    if b is not None:
        out.append(Method("VBLL-rule", RULE, b.vbll_selector(vbll_strategy(cfg)), rule))
    else:
        log.warning("selector checkpoint missing: VBLL-rule skipped")
    if models.policy_uncond is not None:
        out.append(Method("Unconditioned", FIXED, UnconditionedSelector(), LearnedGenerator(models.policy_uncond)))
    else:
        log.warning("unconditioned policy checkpoint missing: skipped")
    if models.policy is not None:
        gen = LearnedGenerator(models.policy)
        out += [Method(f"DDPM-{EXPERT_LABELS[e]}", FIXED, FixedSelector(e), gen) for e in ExpertId]
        out.append(Method("DDPM-Random", FIXED, RandomSelector(K_EXPERTS), gen))
        if b is not None:
            out.append(Method("MoE", FIXED, MoeSelector(b.classifier), gen))
            out.append(Method("MLP-regress", FIXED, NllRegressSelector(b.regressor), gen))
            lcb1 = SelectionStrategy("lcb", 1.0)
            out.append(Method("MC-Dropout", UNCERTAIN, McDropoutSelector(b.dropout_head, cfg.selector.mc_passes, lcb1), gen))
            out.append(Method("VBLL", UNCERTAIN, b.vbll_selector(vbll_strategy(cfg)), gen))
    else:
        log.warning("policy checkpoint missing: learned-execution methods skipped")
    return out


METRICS = ("nll", "rmse", "entropy")


@dataclass
class MethodResult:
    method: str
    category: str
    seeds: list
    per_episode: dict  # metric -> list of per-episode means
    coverage: list
    histogram: list

    def row(self) -> dict:
        row = {"method": self.method, "category": self.category, "episodes": len(self.seeds)}
        for m in METRICS:
            v = np.array(self.per_episode[m], dtype=float)
            v = v[np.isfinite(v)]
            row[f"{m}_mean"] = float(v.mean()) if v.size else math.nan
            row[f"{m}_std"] = float(v.std()) if v.size else math.nan
        row["coverage"] = float(np.mean(self.coverage)) if self.coverage else 0.0
        for i, h in enumerate(self.histogram, start=1):
            row[f"expert{i}"] = h
        return row


def run_method(cfg: Config, grid: OccupancyGrid, featurizer: Featurizer, method: Method, seeds: list[int],
               trace_dir: Path | None = None) -> MethodResult:
    setup = EpisodeSetup.from_config(cfg, grid, featurizer)
    per = {m: [] for m in METRICS}
    cov, hist = [], [0] * K_EXPERTS
    for s in seeds:
        res: EpisodeResult = run_episode(setup, method.selector, method.generator, s)
        per["nll"].append(res.mean_nll)
        per["rmse"].append(res.mean_rmse)
        per["entropy"].append(res.mean_entropy)
        cov.append(res.coverage)
        for i, h in enumerate(res.expert_histogram()):
            hist[i] += h
        if trace_dir is not None:
            trace_dir.mkdir(parents=True, exist_ok=True)
            (trace_dir / f"{_slug(method.name)}_{s}.jsonl").write_text("\n".join(trace_lines(res)) + "\n")
    return MethodResult(method.name, method.category, list(seeds), per, cov, hist)


def _slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name)


def featurizer_for(models: Models, cfg: Config) -> Featurizer:
    for m in (models.bundle, models.policy, models.policy_uncond):
        if m is not None and m.manifest:
            return Featurizer.from_manifest(m.manifest)
    return Featurizer(FeatureLayout.from_config(cfg))


def evaluate(cfg: Config, models: Models, seeds: list[int] | None = None, out_dir: Path | None = None,
             methods: list[Method] | None = None, grid: OccupancyGrid | None = None) -> list[MethodResult]:
    seeds = seeds if seeds is not None else episode_seeds(cfg.seed, "eval", cfg.harness.eval_episodes)
    grid = grid or grid_for(cfg)
    feat = featurizer_for(models, cfg)
    methods = methods if methods is not None else method_matrix(cfg, models)
    trace_dir = out_dir / "traces" if out_dir is not None else None
    return [run_method(cfg, grid, feat, m, seeds, trace_dir) for m in methods]


def ablate(cfg: Config, models: Models, kind: str, grid_values: list | None = None, seeds: list[int] | None = None,
           execution: str = "learned", grid: OccupancyGrid | None = None) -> list[MethodResult]:
    """Sweep selection strategies or the pessimism coefficient for the VBLL
    selector, reusing one checkpoint and one seed list."""
    if models.bundle is None:
        raise ConfigurationError("ablation needs a trained selector checkpoint")
    if execution == "learned":
        if models.policy is None:
            raise ConfigurationError("learned-execution ablation needs a policy checkpoint")
        gen: Generator = LearnedGenerator(models.policy)
    else:
        gen = RuleGenerator()
    bundle = models.bundle
    if kind == "strategy":
        values = grid_values if grid_values is not None else cfg.harness.strategies
        methods = [Method(f"VBLL-{v}", UNCERTAIN, bundle.vbll_selector(vbll_strategy(cfg, v)), gen) for v in values]
    elif kind == "lambda":
        values = grid_values if grid_values is not None else cfg.harness.lambda_grid
        methods = [Method(f"VBLL-lcb-lambda={float(v):g}", UNCERTAIN,
                          bundle.vbll_selector(vbll_strategy(cfg, "lcb", float(v))), gen) for v in values]
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    return evaluate(cfg, models, seeds, None, methods, grid)


# ---------------------------------------------------------------- reporting


def rows_of(results: list[MethodResult]) -> list[dict]:
    return [r.row() for r in results]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    return buf.getvalue()


def read_results_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            if k in ("method", "category"):
                out[k] = v
            elif k == "episodes" or k.startswith("expert"):
                out[k] = int(v)
            else:
                out[k] = float(v)
        rows.append(out)
    return rows


def mark_best(rows: list[dict]) -> dict[tuple[str, str], tuple[int | None, int | None]]:
    """(category, metric) -> (best row index, second-best row index); lower is
    better, ties resolved by table order so exactly one best exists."""
    marks = {}
    for cat in dict.fromkeys(r["category"] for r in rows):
        idx = [i for i, r in enumerate(rows) if r["category"] == cat]
        for m in METRICS:
            vals = [(rows[i][f"{m}_mean"], i) for i in idx if math.isfinite(rows[i][f"{m}_mean"])]
            vals.sort()
            marks[(cat, m)] = (vals[0][1] if vals else None, vals[1][1] if len(vals) > 1 else None)
    return marks


def report_text(rows: list[dict], cfg_text: str = "") -> str:
    marks = mark_best(rows)
    version = hashlib.sha256((VERSION + "\n" + cfg_text).encode()).hexdigest()[:12]
    lines = [f"trackselect {VERSION} run {version}", "* best, + second best (per category, lower is better)", ""]
    head = f"{'method':<16} {'category':<22} " + " ".join(f"{m.upper():>20}" for m in METRICS) + f" {'coverage':>9}"
    lines += [head, "-" * len(head)]
    cur = None
    for i, r in enumerate(rows):
        if r["category"] != cur:
            if cur is not None:
                lines.append("")
            cur = r["category"]
        cells = []
        for m in METRICS:
            best, second = marks[(r["category"], m)]
            tag = "*" if i == best else ("+" if i == second else " ")
            cells.append(f"{r[f'{m}_mean']:9.3f} ± {r[f'{m}_std']:7.3f}{tag}")
        lines.append(f"{r['method']:<16} {r['category']:<22} " + " ".join(f"{c:>20}" for c in cells)
                     + f" {r['coverage']:9.3f}")
    return "\n".join(lines) + "\n"


def paired_table(results: list[MethodResult], metric: str = "nll") -> str:
    """Per-seed values for each method side by side."""
    if not results:
        return ""
    names = [r.method for r in results]
    lines = ["seed," + ",".join(names)]
    for j, s in enumerate(results[0].seeds):
        lines.append(f"{s}," + ",".join(f"{r.per_episode[metric][j]:.4f}" for r in results))
    return "\n".join(lines) + "\n"


def aggregate_traces(trace_dir: Path) -> dict[str, dict]:
    """Per-method metric means recomputed from stored traces."""
    per: dict[str, dict[str, list]] = {}
    for path in sorted(trace_dir.glob("*.jsonl")):
        method = path.stem.rsplit("_", 1)[0]
        recs = [json.loads(line) for line in path.read_text().splitlines() if line]
        steps = [r for r in recs if r.get("kind") != "episode"]
        d = per.setdefault(method, {m: [] for m in METRICS})
        for m in METRICS:
            vals = [r[m] for r in steps if r[m] is not None]
            d[m].append(float(np.mean(vals)) if vals else math.nan)
    return {k: {f"{m}_mean": float(np.nanmean(v[m])) if np.any(np.isfinite(v[m])) else math.nan for m in METRICS}
            for k, v in per.items()}
