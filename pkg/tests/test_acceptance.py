"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import filecmp
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from trackselect import belief as B
from trackselect import bandit, diffusion as D, harness as Hn, vbll as V
from trackselect.bandit import SelectionStrategy, Strategy
from trackselect.config import Config
from trackselect.controller import (EpisodeSetup, FixedSelector, LearnedGenerator, RuleGenerator,
                                    UnconditionedSelector, capture_contexts, measure_replan_latency,
                                    selection_overhead)
from trackselect.cli import latency_spacing
from trackselect.env import load_map

from test_belief import batch_map, cv_model, random_spd, run_filter
from test_vbll import mc_elbo, random_head, rel_err, synthetic


@pytest.fixture
def verdict(request, capsys):
    def report(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    pol = D.DiffusionPolicy(16, 2, 64, 3, rng=np.random.default_rng(101))
    a, f, k = rng.normal(size=(32, 16, 2)), rng.normal(size=(32, 64)), rng.integers(1, 4, 32)

    def dloss():
        return D.diffusion_loss(a, f, k, pol, np.random.default_rng(102))

    _, g, ge = dloss()
    params, grads = pol.denoiser.net.params + [pol.embeddings], g + [ge]
    worst_d = 0.0
    for _ in range(100):
        pi = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[pi].shape)
        old = params[pi][idx]
        params[pi][idx] = old + 1e-5
        lp = dloss()[0]
        params[pi][idx] = old - 1e-5
        lm = dloss()[0]
        params[pi][idx] = old
        worst_d = max(worst_d, rel_err((lp - lm) / 2e-5, grads[pi][idx]))

    heads = [random_head(rng, 16) for _ in range(3)]
    phi, r, kk = rng.normal(size=(90, 16)), rng.normal(size=90), rng.integers(1, 4, 90)
    _, vg = V.vbll_loss(heads, phi, r, kk, 1.0)
    thetas = [h.pack() for h in heads]
    worst_v = 0.0
    for _ in range(100):
        hi = int(rng.integers(3))
        j = int(rng.integers(thetas[hi].size))
        vals = []
        for sgn in (1, -1):
            th = thetas[hi].copy()
            th[j] += sgn * 1e-5
            h = heads[hi].copy()
            h.unpack(th)
            hs = list(heads)
            hs[hi] = h
            vals.append(V.vbll_loss(hs, phi, r, kk, 1.0)[0])
        worst_v = max(worst_v, rel_err((vals[0] - vals[1]) / 2e-5, vg[hi][j]))
    dt = time.perf_counter() - t0
    verdict(1, worst_d < 1e-5 and worst_v < 1e-5 and dt < 60,
            f"max rel err denoiser {worst_d:.2e}, VBLL {worst_v:.2e} (< 1e-5); {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_elbo_matches_monte_carlo(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(201)
    zs = []
    for _ in range(20):
        d, n = int(rng.integers(1, 9)), int(rng.integers(1, 40))
        pv = float(rng.uniform(0.3, 3.0))
        head = random_head(rng, d)
        phi, r = rng.normal(size=(n, d)), rng.normal(size=n) * 2
        m, se = mc_elbo(head, phi, r, pv, 100_000, rng)
        zs.append(abs(V.elbo(head, phi, r, pv) - m) / se)
    dt = time.perf_counter() - t0
    verdict(2, max(zs) < 3 and dt < 120, f"worst |closed - MC| = {max(zs):.2f} SE over 20 configs (< 3); {dt:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_03_conjugacy(verdict):
    t0 = time.perf_counter()
    errs, kls = [], []
    for seed in range(10):
        phi, r, _, sigma = synthetic(300 + seed)
        heads, _ = V.fit(phi, r, np.ones(len(r), int), 1, V.FitConfig(learn_noise=False), init_noise_var=[sigma**2])
        m, S = V.conjugate_posterior(phi, r, 1.0, sigma)
        h = heads[0]
        errs.append(max(np.abs(h.mu - m).max(), np.abs(h.cov - S).max()))
        kls.append(V.kl_gaussians(h.mu, h.cov, m, S))
    dt = time.perf_counter() - t0
    verdict(3, max(errs) < 1e-3 and max(kls) < 1e-6 and dt < 120,
            f"max-abs err {max(errs):.2e} (< 1e-3), max KL {max(kls):.2e} (< 1e-6); {dt:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_04_predictive_law(verdict):
    rng = np.random.default_rng(400)
    worst = 0.0
    for _ in range(5):
        d = int(rng.integers(1, 10))
        h = random_head(rng, d)
        x = rng.normal(size=d) * 2
        b = h.mu + rng.standard_normal((1_000_000, d)) @ h.L.T
        y = b @ x + math.sqrt(h.noise_var) * rng.standard_normal(1_000_000)
        m, v = V.predict(h, x)
        n = y.size
        worst = max(worst, abs(y.mean() - m) / math.sqrt(v / n),
                    abs(y.var(ddof=1) - v) / (v * math.sqrt(2.0 / (n - 1))))
    floor_ok = True
    for _ in range(1000):
        d = int(rng.integers(1, 10))
        h = random_head(rng, d)
        floor_ok &= bool(V.predict(h, rng.normal(size=d) * 10)[1] >= h.noise_var)
    verdict(4, worst < 3 and floor_ok,
            f"worst mean/variance deviation {worst:.2f} SE (< 3); variance >= noise on 1000 draws: {floor_ok}")


# ---------------------------------------------------------------- 5


def test_criterion_05_forward_marginal(verdict):
    s = D.make_schedule()
    rng = np.random.default_rng(500)
    a0 = np.array([0.7, -1.2])
    n = 100_000
    worst = 0.0
    for i in (1, 10, 25, 40, 50):
        x = D.forward_diffuse(a0, i, rng.standard_normal((n, 2)), s)
        ab = s.alpha_bars[i]
        var = 1 - ab
        z_mean = np.abs(x.mean(0) - math.sqrt(ab) * a0) / math.sqrt(var / n)
        z_var = np.abs(x.var(0, ddof=1) - var) / (var * math.sqrt(2.0 / (n - 1)))
        # off-diagonal sample covariance of independent coordinates has SE var / sqrt(n)
        z_cov = abs(np.cov(x.T)[0, 1]) / (var / math.sqrt(n))
        worst = max(worst, z_mean.max(), z_var.max(), z_cov)
    verdict(5, worst < 3, f"worst mean/variance/covariance deviation {worst:.2f} SE at steps 1, 10, 25, 40, 50 "
                          f"over 1e5 draws (< 3)")


# ---------------------------------------------------------------- 6, 7


def bimodal_fixture(n=512):
    # +1 / -1 constant sequences with an uninformative (constant) feature
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return np.repeat(signs[:, None, None], 4, axis=1), np.zeros((n, 1))


def test_criterion_06_multimodality(verdict):
    t0 = time.perf_counter()
    acts, feat = bimodal_fixture()
    pol = D.DiffusionPolicy(4, 1, 1, None, hidden=(64, 64), rng=np.random.default_rng(601))
    D.fit_policy(pol, acts, feat, None, epochs=300, batch_size=64, lr=2e-3, rng=np.random.default_rng(602))
    c = np.zeros((1000, 1))
    m = D.sample_actions(c, pol.denoiser, pol.schedule, np.random.default_rng(604), 4, 1).reshape(1000, -1).mean(1)
    shares = (np.mean(np.abs(m - 1) < 0.5), np.mean(np.abs(m + 1) < 0.5))

    from trackselect.nn import Adam, Mlp
    reg = Mlp([1, 64, 64, 4], "tanh", rng=np.random.default_rng(605))
    opt = Adam(lr=2e-3)
    y = acts.reshape(len(acts), -1)
    rng = np.random.default_rng(606)
    for _ in range(300):
        for b in np.array_split(rng.permutation(len(y)), 8):
            out = reg.forward(feat[b], train=True)
            grads, _ = reg.backward(2 * (out - y[b]) / len(b))
            opt.step(reg.params, grads)
    ro = reg.forward(c).mean(1)
    near = float(np.mean(np.abs(np.abs(ro) - 1) < 0.5))
    dt = time.perf_counter() - t0
    ok = all(0.35 <= s <= 0.65 for s in shares) and near < 0.05 and dt < 600
    verdict(6, ok, f"diffusion mode shares {shares[0]:.3f}/{shares[1]:.3f} (in [0.35, 0.65]); "
                   f"regression outputs near a mode {near:.3f} (< 0.05); {dt:.1f}s")


def test_criterion_07_conditioning_control(verdict):
    rng = np.random.default_rng(700)
    n = 512
    modes = np.array([[0.8, 0.0], [-0.8, 0.0], [0.0, 0.8]])
    k = np.arange(n) % 3 + 1
    acts = np.repeat(modes[k - 1][:, None, :], 4, axis=1)
    feat = rng.normal(size=(n, 4))
    pol = D.DiffusionPolicy(4, 2, 4, 3, hidden=(64, 64), rng=np.random.default_rng(701))
    D.fit_policy(pol, acts, feat, k, epochs=300, batch_size=64, lr=2e-3, rng=np.random.default_rng(702))
    c = rng.normal(size=(500, 4))
    shares = []
    for e in (1, 2, 3):
        cond = np.array([pol.conditioning(x, e) for x in c])
        s = D.sample_actions(cond, pol.denoiser, pol.schedule, np.random.default_rng(703 + e), 4, 2).mean(1)
        nearest = np.argmin(np.linalg.norm(s[:, None, :] - modes[None], axis=2), axis=1) + 1
        close = np.linalg.norm(s - modes[e - 1], axis=1) < 0.4
        shares.append(float(np.mean((nearest == e) & close)))
    verdict(7, min(shares) >= 0.9, "in-mode share per expert " + ", ".join(f"{v:.3f}" for v in shares) + " (>= 0.9)")


# ---------------------------------------------------------------- 8


def test_criterion_08_filter_correctness(verdict):
    worst = 0.0
    scenarios = [(), (2,), (1, 2, 3), (5,), (1, 3, 5, 7, 9), (4, 5, 6, 7)]
    for j, gaps in enumerate(scenarios):
        rng = np.random.default_rng(800 + j)
        model = cv_model(kappa_q=2.0, kappa_r=2.0)
        q_w = 2.0 * np.diag([0.3, 0.2])
        zs = [None if (t + 1) in gaps else rng.normal(size=4) * 3 for t in range(10)]
        z0 = rng.normal(size=4)
        b = run_filter(z0, zs, model)
        mean, cov = batch_map(z0, zs, model, q_w)
        worst = max(worst, np.abs(b.mean - mean).max(), np.abs(b.cov - cov).max())
    rng = np.random.default_rng(850)
    F = np.block([[np.eye(2), np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    G = np.vstack([np.eye(2), np.eye(2)])
    mono = True
    for _ in range(500):
        P = random_spd(rng, 4, float(rng.uniform(1e-3, 1e3)))
        m = B.FilterModel(F, G @ random_spd(rng, 2, 0.5) @ G.T, np.eye(4), random_spd(rng, 4, 0.1))
        bel = B.TargetBelief(rng.normal(size=4), P)
        tol = 1e-9 * max(1.0, np.abs(P).max())
        mono &= bool(np.linalg.eigvalsh(P - B.kf_update(bel, rng.normal(size=4), m).cov).min() > -tol)
        mono &= bool(np.linalg.eigvalsh(B.kf_predict(bel, m).cov - F @ P @ F.T).min() > -tol)
    verdict(8, worst < 1e-8 and mono,
            f"max deviation from batch MAP {worst:.2e} over {len(scenarios)} scenarios (< 1e-8); "
            f"Loewner monotonicity on 500 draws: {mono}")


# ---------------------------------------------------------------- pipeline for 9-11


@pytest.fixture(scope="module")
def pipeline():
    """Default-config demonstrations, training and evaluation, as the CLI runs them."""
    cfg = Config()
    t0 = time.perf_counter()
    ds = Hn.collect_demos(cfg)
    pol, _ = Hn.train_policy(ds, cfg, conditioned=True)
    unc, _ = Hn.train_policy(ds, cfg, conditioned=False)
    models = Hn.Models(pol, unc, Hn.train_selector(ds, cfg))
    seeds = Hn.episode_seeds(cfg.seed, "eval", cfg.harness.eval_episodes)
    results = {r.method: r for r in Hn.evaluate(cfg, models, seeds)}
    greedy = Hn.ablate(cfg, models, "strategy", ["greedy"], seeds=seeds)[0]
    lam0 = Hn.ablate(cfg, models, "lambda", [0.0], seeds=seeds)[0]
    return {"cfg": cfg, "models": models, "results": results, "greedy": greedy, "lambda0": lam0,
            "seconds": time.perf_counter() - t0}


def test_criterion_09_selection_algebra(verdict, pipeline):
    rng = np.random.default_rng(900)
    greedy = SelectionStrategy(Strategy.GREEDY)
    eq_lcb = eq_ts = affine = True
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        m, s = rng.normal(size=k) * 3, rng.exponential(size=k)
        g = bandit.select_expert(m, s, greedy)
        eq_lcb &= bandit.select_expert(m, s, SelectionStrategy(Strategy.LCB, 0.0)) == g
        eq_ts &= bandit.select_expert(m, np.zeros(k), SelectionStrategy(Strategy.THOMPSON), rng) == \
            bandit.select_expert(m, np.zeros(k), greedy)
        a, b = float(rng.uniform(0.1, 10)), float(rng.normal() * 10)
        for kind in (Strategy.GREEDY, Strategy.LCB, Strategy.UCB):
            st = SelectionStrategy(kind, 1.0)
            affine &= bandit.select_expert(a * m + b, a * s, st) == bandit.select_expert(m, s, st)
    r0, rg = pipeline["lambda0"].row(), pipeline["greedy"].row()
    r0.pop("method"), rg.pop("method")
    rows_equal = r0 == rg and pipeline["lambda0"].per_episode == pipeline["greedy"].per_episode
    verdict(9, eq_lcb and eq_ts and affine and rows_equal,
            f"LCB(0)=Greedy {eq_lcb}, zero-width Thompson=Greedy {eq_ts}, affine invariance {affine}, "
            f"lambda=0 row identical to Greedy row {rows_equal}")


def test_criterion_10_directional_ordering(verdict, pipeline):
    res = pipeline["results"]
    nll = {k: float(np.mean(v.per_episode["nll"])) for k, v in res.items()}
    g = float(np.mean(pipeline["greedy"].per_episode["nll"]))
    fixed = ["Explore-rule", "Reacq-rule", "Track-rule", "Random-rule"]
    a = all(nll["VBLL-rule"] <= nll[f] for f in fixed)
    b = nll["VBLL"] <= g
    c = nll["VBLL"] <= nll["Unconditioned"]
    detail = (f"(a) VBLL-rule {nll['VBLL-rule']:.3f} vs " + ", ".join(f"{f} {nll[f]:.3f}" for f in fixed)
              + f" -> {a}; (b) VBLL-LCB {nll['VBLL']:.3f} vs VBLL-Greedy {g:.3f} -> {b}; "
              f"(c) VBLL {nll['VBLL']:.3f} vs Unconditioned {nll['Unconditioned']:.3f} -> {c}; "
              f"pipeline {pipeline['seconds']:.0f}s")
    if not (a and b and c):
        order = ["VBLL-rule", *fixed, "VBLL", "Unconditioned"]
        table = Hn.paired_table([res[m] for m in order] + [pipeline["greedy"]])
        detail += "\npaired per-seed NLL (last column VBLL-Greedy, learned execution):\n" + table
    verdict(10, a and b and c and pipeline["seconds"] < 1800, detail)


def test_criterion_11_latency(verdict, pipeline):
    cfg, models = pipeline["cfg"], pipeline["models"]
    grid = load_map("maze_large")
    setup = EpisodeSetup.from_config(cfg.replace(world__map="maze_large"), grid, Hn.featurizer_for(models, cfg))
    ctxs = capture_contexts(setup, cfg.seed, latency_spacing(cfg), 8)
    pipes = {
        "rule-explore": (FixedSelector(1), RuleGenerator()),
        "learned-unconditioned": (UnconditionedSelector(), LearnedGenerator(models.policy_uncond)),
        "learned-vbll": (models.bundle.vbll_selector(Hn.vbll_strategy(cfg)), LearnedGenerator(models.policy)),
    }
    st = measure_replan_latency(pipes, ctxs, 100, cfg.horizon.t_act, cfg.horizon.t_pred, cfg.seed)
    rule, unc, vb = (st[k]["median_ms"] for k in pipes)
    overhead = selection_overhead(st, "learned-vbll", "learned-unconditioned")
    verdict(11, vb < rule and overhead < 0.10,
            f"median ms/step rule-explore {rule:.3f}, learned-unconditioned {unc:.3f}, learned-vbll {vb:.3f}; "
            f"learned < rule {vb < rule}; VBLL selection stage {st['learned-vbll']['select_median_ms']:.4f} ms/step = {100 * overhead:.1f}% of unconditioned (< 10%)")


# ---------------------------------------------------------------- 12

TINY_CFG = """\
world.episode_length = 80
harness.demo_episodes = 3
harness.eval_episodes = 2
harness.short_episodes = 1
harness.latency_trials = 5
policy.hidden = [16, 16]
policy.epochs = 2
selector.hidden = [8]
selector.epochs = 2
vbll.max_epochs = 50
"""

COMMANDS = [["collect"], ["train-policy"], ["train-selector"], ["eval"], ["ablate", "--kind", "lambda"],
            ["ablate", "--kind", "strategy", "--execution", "rule"], ["latency", "--map", "maze_small"], ["report"]]
# wall-clock measurements are inherently non-reproducible
NONDETERMINISTIC = {"latency.json"}


def run_cli(out, cfg_path):
    for cmd in COMMANDS:
        cmd = [sys.executable, "-m", "trackselect", "--config", str(cfg_path), "--seed", "3", "--out", str(out)] + cmd
        subprocess.run(cmd, check=True, capture_output=True)


def test_criterion_12_determinism(verdict, tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_CFG)
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli(a, cfg_path)
    run_cli(b, cfg_path)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    compared = [f for f in files if f.name not in NONDETERMINISTIC]
    diff = [str(f) for f in compared if not filecmp.cmp(a / f, b / f, shallow=False)]
    ok = files == other and not diff and len(compared) > 10
    verdict(12, ok, f"{len(compared)} output files compared across two runs of {len(COMMANDS)} commands, "
                    f"{len(diff)} differ{': ' + ', '.join(diff) if diff else ''} (latency.json exempt)")
