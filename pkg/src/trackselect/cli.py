"""Command-line entry point: ``python -m trackselect <command>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import Config, load_config
from .controller import (EpisodeSetup, FixedSelector, LearnedGenerator, RuleGenerator, UnconditionedSelector,
                         capture_contexts, measure_replan_latency,
                         selection_overhead)
from .diffusion import DiffusionPolicy
from .env import load_map

log = logging.getLogger("trackselect")

DATASET = "dataset.bin"
POLICY = "policy.ckpt"
POLICY_UNCOND = "policy_uncond.ckpt"
SELECTOR = "selector.ckpt"
RESULTS = "results.csv"
REPORT = "report.txt"


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "short_eval", False):
        cfg = cfg.replace(harness__eval_episodes=cfg.harness.short_episodes)
    return cfg


def _load_models(out: Path) -> harness.Models:
    m = harness.Models()
    if (out / POLICY).exists():
        m.policy = DiffusionPolicy.load(out / POLICY)
    if (out / POLICY_UNCOND).exists():
        m.policy_uncond = DiffusionPolicy.load(out / POLICY_UNCOND)
    if (out / SELECTOR).exists():
        m.bundle = harness.SelectorBundle.load(out / SELECTOR)
    return m


def _write_curve(path: Path, curve: list[float]):
    path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))


def cmd_collect(cfg: Config, out: Path, args):
    ds = harness.collect_demos(cfg)
    ds.save(out / DATASET)
    print(f"collected {len(ds)} windows -> {out / DATASET}")


def cmd_train_policy(cfg: Config, out: Path, args):
    ds = harness.Dataset.load(out / DATASET)
    pol, curve = harness.train_policy(ds, cfg, conditioned=True)
    pol.save(out / POLICY)
    _write_curve(out / "policy_loss.csv", curve)
    unc, curve_u = harness.train_policy(ds, cfg, conditioned=False)
    unc.save(out / POLICY_UNCOND)
    _write_curve(out / "policy_uncond_loss.csv", curve_u)
    print(f"policy loss {curve[0]:.4f} -> {curve[-1]:.4f}; unconditioned {curve_u[0]:.4f} -> {curve_u[-1]:.4f}")


def cmd_train_selector(cfg: Config, out: Path, args):
    ds = harness.Dataset.load(out / DATASET)
    bundle = harness.train_selector(ds, cfg)
    bundle.save(out / SELECTOR, cfg.vbll.prior_var)
    print(f"selector trained ({bundle.fit_info['epochs']} VBLL epochs) -> {out / SELECTOR}")


def cmd_eval(cfg: Config, out: Path, args):
    models = _load_models(out)
    results = harness.evaluate(cfg, models, out_dir=out)
    rows = harness.rows_of(results)
    (out / RESULTS).write_text(harness.results_csv(rows))
    (out / "paired_nll.csv").write_text(harness.paired_table(results))
    text = harness.report_text(rows, cfg.dumps())
    (out / REPORT).write_text(text)
    print(text, end="")


def cmd_ablate(cfg: Config, out: Path, args):
    models = _load_models(out)
    results = harness.ablate(cfg, models, args.kind, execution=args.execution)
    rows = harness.rows_of(results)
    (out / f"ablate_{args.kind}.csv").write_text(harness.results_csv(rows))
    print(harness.report_text(rows, cfg.dumps()), end="")


def cmd_latency(cfg: Config, out: Path, args):
    models = _load_models(out)
    if models.policy is None or models.policy_uncond is None or models.bundle is None:
        raise SystemExit("latency needs policy, unconditioned policy and selector checkpoints")
    grid = load_map(args.map)
    feat = harness.featurizer_for(models, cfg)
    setup = EpisodeSetup.from_config(cfg.replace(world__map=args.map), grid, feat)
    contexts = capture_contexts(setup, cfg.seed, latency_spacing(cfg), 8)
    pipelines = {
        "rule-explore": (FixedSelector(1), RuleGenerator()),
        "learned-unconditioned": (UnconditionedSelector(), LearnedGenerator(models.policy_uncond)),
        "learned-vbll": (models.bundle.vbll_selector(harness.vbll_strategy(cfg)), LearnedGenerator(models.policy)),
    }
    stats = measure_replan_latency(pipelines, contexts, cfg.harness.latency_trials, cfg.horizon.t_act,
                                   cfg.horizon.t_pred, cfg.seed)
    overhead = selection_overhead(stats, "learned-vbll", "learned-unconditioned")
    (out / "latency.json").write_text(json.dumps({"map": args.map, "stats": stats, "selection_overhead": overhead},
                                                 indent=2, sort_keys=True) + "\n")
    for name, s in stats.items():
        print(f"{name:<24} median {s['median_ms']:.3f} ms/step  p95 {s['p95_ms']:.3f}  cv {s['cv']:.2f}")
    print(f"selection overhead {100 * overhead:.1f}%")


def latency_spacing(cfg: Config, count: int = 8) -> int:
    """Replan-aligned spacing that spreads ``count`` fixture contexts over one episode."""
    t = cfg.horizon.t_act
    return t * max(1, cfg.world.episode_length // (count * t))


def cmd_report(cfg: Config, out: Path, args):
    rows = harness.read_results_csv((out / RESULTS).read_text())
    text = harness.report_text(rows, cfg.dumps())
    (out / REPORT).write_text(text)
    print(text, end="")


COMMANDS = {
    "collect": cmd_collect,
    "train-policy": cmd_train_policy,
    "train-selector": cmd_train_selector,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "latency": cmd_latency,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackselect", description=__doc__)
    p.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("eval", "ablate"):
            sp.add_argument("--short-eval", action="store_true", help="use the short 5-episode evaluation")
        if name == "ablate":
            sp.add_argument("--kind", choices=["strategy", "lambda"], required=True)
            sp.add_argument("--execution", choices=["learned", "rule"], default="learned")
        if name == "latency":
            sp.add_argument("--map", default="maze_large", help="map used for the latency fixture")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](cfg, args.out, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
