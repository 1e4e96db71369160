import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trackselect import serialize, vbll as V

LOG_2PI = math.log(2 * math.pi)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-7)


def random_head(rng, d, scale=0.5):
    h = V.VbllHead.init(d)
    h.mu = rng.normal(size=d)
    h.L_off = np.tril(rng.normal(scale=scale, size=(d, d)), -1)
    h.log_diag = rng.normal(scale=0.3, size=d) - 0.5
    h.log_noise_var = float(rng.normal(scale=0.5))
    return h


def log_normal(x, m, S):
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, (x - m).T).T
    return -0.5 * (np.sum(z * z, axis=1) + 2 * np.sum(np.log(np.diag(L))) + len(m) * LOG_2PI)


def mc_elbo(head, phi, r, prior_var, n_draws, rng):
    """Sample mean and standard error of log p(r|b) + log p(b) - log q(b), b ~ q."""
    d = head.dim
    b = head.mu + rng.standard_normal((n_draws, d)) @ head.L.T
    pred = b @ phi.T
    s2 = head.noise_var
    loglik = -0.5 * np.sum((r - pred) ** 2 / s2 + LOG_2PI + math.log(s2), axis=1)
    logp = -0.5 * (np.sum(b * b, axis=1) / prior_var + d * (LOG_2PI + math.log(prior_var)))
    logq = log_normal(b, head.mu, head.cov)
    x = loglik + logp - logq
    return x.mean(), x.std(ddof=1) / math.sqrt(n_draws)


def test_scalar_golden_value():
    h = V.VbllHead(np.zeros(1), np.zeros((1, 1)), np.zeros(1), 0.0)
    # -0.5 log 2pi - 0 - (1 + 0)/2 + (1 + 0 - 0)/2
    assert V.elbo(h, np.zeros((1, 1)), np.zeros(1), 1.0) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)


def test_prior_equal_posterior_has_zero_kl():
    for pv in (1.0, 4.0, 0.25):
        h = V.VbllHead.init(5, prior_var=pv)
        assert V.elbo(h, np.zeros((0, 5)), np.zeros(0), pv) == pytest.approx(0.0, abs=1e-12)


def test_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        d, n = int(rng.integers(1, 7)), int(rng.integers(1, 30))
        pv = float(rng.uniform(0.3, 3.0))
        head = random_head(rng, d)
        phi, r = rng.normal(size=(n, d)), rng.normal(size=n) * 2
        m, se = mc_elbo(head, phi, r, pv, 100_000, rng)
        z = abs(V.elbo(head, phi, r, pv) - m) / se
        worst = max(worst, z)
    assert worst < 3.0


def test_monte_carlo_discrepancies_are_standard_normal():
    # calibration of the 3-SE band: over many configs the z-scores should look N(0, 1)
    rng = np.random.default_rng(11)
    zs = []
    for _ in range(100):
        d, n = int(rng.integers(1, 7)), int(rng.integers(1, 30))
        pv = float(rng.uniform(0.3, 3.0))
        head = random_head(rng, d)
        phi, r = rng.normal(size=(n, d)), rng.normal(size=n) * 2
        m, se = mc_elbo(head, phi, r, pv, 20_000, rng)
        zs.append((V.elbo(head, phi, r, pv) - m) / se)
    zs = np.array(zs)
    # mean has SE 0.1, sample sd about 0.07
    assert abs(zs.mean()) < 0.3 and 0.8 < zs.std() < 1.2


def test_constant_counted_per_sample():
    # duplicating the data adds one more expected log-likelihood, constant included
    rng = np.random.default_rng(1)
    head = random_head(rng, 3)
    phi, r = rng.normal(size=(7, 3)), rng.normal(size=7)
    e1 = V.elbo(head, phi, r, 1.0)
    e2 = V.elbo(head, np.vstack([phi, phi]), np.concatenate([r, r]), 1.0)
    kl = V.kl_gaussians(head.mu, head.cov, np.zeros(3), np.eye(3))
    assert e2 - e1 == pytest.approx(e1 + kl, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    d = 8
    heads = [random_head(rng, d) for _ in range(3)]
    phi = rng.normal(size=(40, d))
    r = rng.normal(size=40)
    k = rng.integers(1, 4, 40)
    loss, grads = V.vbll_loss(heads, phi, r, k, 1.5)
    thetas = [h.pack() for h in heads]
    worst = 0.0
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
            vals.append(V.vbll_loss(hs, phi, r, k, 1.5)[0])
        worst = max(worst, rel_err((vals[0] - vals[1]) / 2e-5, grads[hi][j]))
    assert worst < 1e-5


def test_loss_single_expert_reduction_and_absent_heads():
    rng = np.random.default_rng(3)
    heads = [random_head(rng, 4) for _ in range(3)]
    phi, r = rng.normal(size=(10, 4)), rng.normal(size=10)
    loss, grads = V.vbll_loss(heads, phi, r, np.full(10, 2), 1.0)
    assert loss == pytest.approx(-V.elbo(heads[1], phi, r, 1.0), rel=1e-14)
    assert np.all(grads[0] == 0) and np.all(grads[2] == 0)
    with pytest.raises(ValueError):
        V.vbll_loss(heads, np.zeros((0, 4)), np.zeros(0), [], 1.0)


def test_loss_weights_follow_batch_shares():
    rng = np.random.default_rng(4)
    heads = [random_head(rng, 3) for _ in range(2)]
    phi, r = rng.normal(size=(12, 3)), rng.normal(size=12)
    k = np.array([1] * 9 + [2] * 3)
    loss, _ = V.vbll_loss(heads, phi, r, k, 1.0)
    want = -(0.75 * V.elbo(heads[0], phi[:9], r[:9]) + 0.25 * V.elbo(heads[1], phi[9:], r[9:]))
    assert loss == pytest.approx(want, rel=1e-14)


def test_nan_inputs_rejected():
    h = V.VbllHead.init(2)
    with pytest.raises(ValueError):
        V.elbo(h, np.array([[np.nan, 0.0]]), np.zeros(1))


def test_conjugate_posterior_trivial_cases():
    m, S = V.conjugate_posterior(np.zeros((0, 3)), np.zeros(0), 2.0, 1.0)
    np.testing.assert_array_equal(m, np.zeros(3))
    np.testing.assert_allclose(S, 2.0 * np.eye(3))
    m, S = V.conjugate_posterior(np.ones((1, 1)), np.ones(1), 1.0, 1.0)
    assert m[0] == pytest.approx(0.5) and S[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        V.conjugate_posterior(np.ones((1, 1)), np.ones(1), 1.0, 0.0)


def test_conjugate_posterior_solves_normal_equations():
    rng = np.random.default_rng(5)
    phi, r = rng.normal(size=(30, 5)), rng.normal(size=30)
    m, S = V.conjugate_posterior(phi, r, 0.7, 0.4)
    prec = phi.T @ phi / 0.16 + np.eye(5) / 0.7
    assert np.max(np.abs(prec @ m - phi.T @ r / 0.16)) < 1e-10
    assert np.max(np.abs(prec @ S - np.eye(5))) < 1e-10


def synthetic(seed, d=16, n=200, sigma=0.5):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n, d))
    beta = rng.normal(size=d)
    return phi, phi @ beta + sigma * rng.normal(size=n), beta, sigma


@pytest.mark.parametrize("seed", [0, 1])
def test_fit_recovers_conjugate_posterior(seed):
    phi, r, _, sigma = synthetic(seed)
    heads, info = V.fit(phi, r, np.ones(len(r), int), 1, V.FitConfig(learn_noise=False), init_noise_var=[sigma**2])
    m, S = V.conjugate_posterior(phi, r, 1.0, sigma)
    h = heads[0]
    assert max(np.abs(h.mu - m).max(), np.abs(h.cov - S).max()) < 1e-3
    assert V.kl_gaussians(h.mu, h.cov, m, S) < 1e-6
    assert h.noise_var == pytest.approx(sigma**2)


def test_fit_recovers_ground_truth_within_posterior_spread():
    phi, r, beta, _ = synthetic(7, d=6, n=400)
    heads, _ = V.fit(phi, r, np.ones(len(r), int), 1)
    h = heads[0]
    sd = np.sqrt(np.diag(h.cov))
    assert np.all(np.abs(h.mu - beta) < 3 * sd)
    assert h.noise_var == pytest.approx(0.25, rel=0.25)


def test_fit_is_deterministic_and_rejects_empty_expert():
    phi, r, _, _ = synthetic(3, d=4, n=60)
    k = np.array([1, 2] * 30)
    cfg = V.FitConfig(max_epochs=200)
    a, _ = V.fit(phi, r, k, 2, cfg)
    b, _ = V.fit(phi, r, k, 2, cfg)
    assert all(x.pack().tobytes() == y.pack().tobytes() for x, y in zip(a, b))
    with pytest.raises(V.ConfigurationError):
        V.fit(phi, r, k, 3, cfg)


def test_predict_trivial_cases():
    rng = np.random.default_rng(6)
    h = random_head(rng, 4)
    m, v = V.predict(h, np.zeros(4))
    assert m == 0.0 and v == pytest.approx(h.noise_var)
    h.log_diag = np.full(4, -np.inf)
    h.L_off = np.zeros((4, 4))
    _, v = V.predict(h, rng.normal(size=4))
    assert v == pytest.approx(h.noise_var, rel=1e-15)


def test_predict_matches_monte_carlo():
    rng = np.random.default_rng(8)
    h = random_head(rng, 5)
    x = rng.normal(size=5)
    n = 1_000_000
    b = h.mu + rng.standard_normal((n, 5)) @ h.L.T
    y = b @ x + math.sqrt(h.noise_var) * rng.standard_normal(n)
    m, v = V.predict(h, x)
    assert abs(y.mean() - m) < 3 * math.sqrt(v / n)
    # var of the sample variance for a Gaussian is 2 v^2 / (n - 1)
    assert abs(y.var(ddof=1) - v) < 3 * v * math.sqrt(2.0 / (n - 1))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(1, 8))
def test_predictive_variance_properties(seed, d):
    rng = np.random.default_rng(seed)
    h = random_head(rng, d)
    x = rng.normal(size=d) * 3
    _, v1 = V.predict(h, x)
    _, v2 = V.predict(h, 2 * x)
    assert v1 >= h.noise_var
    assert (v2 - h.noise_var) == pytest.approx(4 * (v1 - h.noise_var), rel=1e-10)
    means, vars_ = V.predict(h, np.vstack([x, 2 * x]))
    assert vars_[0] == pytest.approx(v1) and vars_[1] == pytest.approx(v2)


def test_uncertainty_grows_off_support():
    rng = np.random.default_rng(9)
    d, pv = 6, 2.0
    phi = np.zeros((300, d))
    phi[:, :4] = rng.normal(size=(300, 4))
    r = phi @ rng.normal(size=d) + 0.3 * rng.normal(size=300)
    heads, _ = V.fit(phi, r, np.ones(300, int), 1, V.FitConfig(prior_var=pv))
    h = heads[0]
    for s in (0.5, 1.0, 4.0):
        x = np.zeros(d)
        x[:4] = rng.normal(size=4)
        x[4:] = rng.normal(size=2)
        x[4:] *= s / np.linalg.norm(x[4:])
        _, v = V.predict(h, x)
        assert v - h.noise_var >= s * s * pv / (1 + 1e-3)


def test_head_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    heads = [random_head(rng, 4) for _ in range(3)]
    V.save_heads(tmp_path / "h.bin", heads, "hash", 1.0)
    back, meta = V.load_heads(tmp_path / "h.bin")
    assert meta["K"] == 3 and meta["d"] == 4 and meta["feature_hash"] == "hash"
    for a, b in zip(heads, back):
        np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12)
        np.testing.assert_array_equal(a.mu, b.mu)
    arrays = {}
    V.save_heads(arrays, heads)
    arrays["vbll1.L"] = -arrays["vbll1.L"]
    with pytest.raises(serialize.ContainerError):
        V.heads_from_arrays(arrays, 3, 4)
    with pytest.raises(serialize.ContainerError):
        V.heads_from_arrays(arrays, 3, 5)
