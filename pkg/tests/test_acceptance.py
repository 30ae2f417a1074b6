"""Acceptance checks, one test group per numbered criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints a
``criterion N: PASS`` or ``FAIL`` line for each group.  Running this file
directly does the same.
"""
import sys
import time

import numpy as np
import pytest

from oracles import golden_crr
from qsgp import data as datamod
from qsgp.artifact import ModelArtifact
from qsgp.chevron import VariationalState
from qsgp.cli import main
from qsgp.control_variates import cv_update_running, init_control_variate
from qsgp.diagnostics import conjugate_instance, cv_variance_report, gradient_report, unbiasedness_report
from qsgp.elbo import exact_elbo, exact_elbo_grads, exact_posterior, expected_log_lik, log_marginal_likelihood
from qsgp.estimators import estimate_elbo_lower_bound, estimate_hyper_grads, sample_batch
from qsgp.features import BasisExpansion, Hyperparameters, feature_block
from qsgp.optimizer import TrainConfig, TrainData, closed_form_crr, init_training, rvm_prune, sgd_step, train
from qsgp.predict import evaluate, predict, predict_augmented
from qsgp.sites import LAPLACE, LOGISTIC, SiteProjection

criterion = pytest.mark.criterion


# 1 ---------------------------------------------------------------------------

@criterion(1)
def test_estimators_unbiased():
    start = time.perf_counter()
    rows = unbiasedness_report(replicates=200_000, seed=0, m_tilde=3, n_tilde=4)
    elapsed = time.perf_counter() - start
    for r in rows:
        assert abs(r.z) <= 4.0, r
    assert elapsed <= 60.0


# 2 ---------------------------------------------------------------------------

def _fd(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += eps
        dn[idx] -= eps
        g[idx] = (f(up) - f(dn)) / (2 * eps)
    return g


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@criterion(2)
def test_exact_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    n, m = 10, 6
    Phi = rng.normal(size=(n, m))
    B = rng.normal(size=(m, m))
    S = B @ B.T + m * np.eye(m)
    y = rng.normal(size=n)
    mu = rng.normal(size=m)
    C = np.tril(rng.normal(size=(m, m)) * 0.3) + np.eye(m)
    g_mu, g_C = exact_elbo_grads(Phi, S, y, 0.5, mu, C)
    fd_mu = _fd(lambda v: exact_elbo(Phi, S, y, 0.5, v, C).l_mu, mu)
    fd_C = np.tril(_fd(lambda v: exact_elbo(Phi, S, y, 0.5, mu, np.tril(v)).l_sigma, C))
    assert _rel(g_mu, fd_mu) <= 1e-4
    assert _rel(g_C, fd_C) <= 1e-4


@criterion(2)
def test_hyper_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    n, m, d = 10, 6, 2
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    ex = BasisExpansion.rff(m, Hyperparameters.create(d, [0.8, 1.3], 1.2, 0.3), seed=5)
    st = VariationalState(rng.normal(size=m) * 0.5, rng.normal(size=m) * 0.2 - 0.3,
                          np.tril(rng.normal(size=(m, m)) * 0.2, -1))
    b = sample_batch((0, 0), n, m, m, n, enumerate_all=True)
    g = estimate_hyper_grads(b, ex, X, y, ex.hyper.noise_variance, st)

    def elbo(vec):
        e = ex.with_hyper(Hyperparameters.from_vector(vec))
        P = feature_block(e, X, np.arange(n), np.arange(m))
        return exact_elbo(P, np.eye(m), y, e.hyper.noise_variance, st.mu, st.dense()).elbo

    vec = ex.hyper.to_vector()
    slots = [p for p in range(len(vec)) if p != ex.hyper.laplace_slot()]
    fd = _fd(elbo, vec)
    assert _rel(g[slots], fd[slots]) <= 1e-4


@criterion(2)
def test_stochastic_gradient_means():
    start = time.perf_counter()
    rows = gradient_report(replicates=20_000, seed=0)
    for r in rows:
        assert abs(r.z) <= 4.0, r
    assert time.perf_counter() - start <= 120.0


# 3 ---------------------------------------------------------------------------

@criterion(3)
def test_closed_form_diagonal_against_golden_section():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        q, s2, s = rng.uniform(0, 10), rng.uniform(0.05, 3), rng.uniform(0.05, 5)
        worst = max(worst, abs(closed_form_crr(q, s2, s) - golden_crr(q, s2, s)))
    assert worst <= 1e-8
    assert time.perf_counter() - start <= 5.0


# 4 ---------------------------------------------------------------------------

@criterion(4)
def test_running_vector_recurrence():
    rng = np.random.default_rng(5)
    n, m, nb = 100, 40, 20
    Phi = rng.normal(size=(n, m))
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), np.ones(m), phi=Phi)
    st = VariationalState(np.zeros(m), np.zeros(m), np.zeros((m, 0)))
    cv = init_control_variate(st, ex, None, n, nb, seed=5)
    assert np.all(cv.a_mu == 0.0)
    for _ in range(500):
        idx = np.unique(rng.integers(0, m, size=rng.integers(1, 8)))
        old = st.mu[idx].copy()
        st.mu[idx] += rng.normal(size=len(idx))
        cv_update_running(cv, idx, old, st.mu[idx])
    assert np.max(np.abs(cv.a_mu - Phi[cv.p] @ st.mu)) <= 1e-9


# 5 ---------------------------------------------------------------------------

@criterion(5)
def test_control_variate_contract():
    start = time.perf_counter()
    rows = cv_variance_report(replicates=3000, seed=0, n=2000, m=500, m_tilde=50, n_tilde=50,
                              n_bars=(0, 50, 200, 500))
    var = {r.term: r.mean for r in rows if r.report == "cv_variance"}
    for r in rows:
        if r.report == "cv_zero_mean":
            assert abs(r.z) <= 4.0, r
    assert var["n_bar=50"] >= var["n_bar=200"] >= var["n_bar=500"]
    assert var["n_bar=500"] <= 0.5 * var["n_bar=0"]
    assert time.perf_counter() - start <= 120.0


# 6 ---------------------------------------------------------------------------

def _site_instance(likelihood):
    rng = np.random.default_rng(6)
    n, m = 12, 8
    Phi = rng.normal(size=(n, m)) / np.sqrt(m)
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), np.ones(m), phi=Phi)
    y = np.where(rng.normal(size=n) > 0, 1.0, -1.0)
    site = SiteProjection(likelihood, y if likelihood == LOGISTIC else 0.7 * y, 0.5)
    st = VariationalState(rng.normal(size=m), rng.normal(size=m) * 0.3 - 0.5,
                          np.tril(rng.normal(size=(m, 3)) * 0.3, -1))
    return Phi, ex, site, st


def _bound_mc(ex, site, st, mt, reps, seed, nt=4):
    n, m = len(site.y), ex.m
    v = np.array([estimate_elbo_lower_bound(sample_batch((seed, t), n, m, mt, nt), ex, None, site, st, 21).value
                  for t in range(reps)])
    return v.mean(), v.std(ddof=1) / np.sqrt(reps)


@criterion(6)
@pytest.mark.parametrize("likelihood", [LOGISTIC, LAPLACE])
def test_lower_bound_direction_and_monotone_bias(likelihood):
    Phi, ex, site, st = _site_instance(likelihood)
    exact = expected_log_lik(site, Phi, st.mu, st.dense(), 21)
    m = ex.m
    bias, se = [], []
    for k, mt in enumerate((1, m // 4, m // 2, m)):
        mean, s = _bound_mc(ex, site, st, mt, 4000, 60 + k)
        assert mean <= exact + 3 * s
        bias.append(exact - mean)
        se.append(s)
    for a in range(3):
        assert bias[a + 1] <= bias[a] + 3 * np.hypot(se[a], se[a + 1])


@criterion(6)
@pytest.mark.parametrize("likelihood", [LOGISTIC, LAPLACE])
def test_lower_bound_collapses_in_full_batch(likelihood):
    Phi, ex, site, st = _site_instance(likelihood)
    n, m = Phi.shape
    b = sample_batch((0, 0), n, m, m, n, enumerate_all=True)
    got = estimate_elbo_lower_bound(b, ex, None, site, st, 21).value
    assert abs(got - expected_log_lik(site, Phi, st.mu, st.dense(), 21)) <= 1e-10


# 7 ---------------------------------------------------------------------------

@criterion(7)
def test_conjugate_convergence():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    n, m, sigma2 = 40, 10, 0.3
    Phi = rng.normal(size=(n, m)) / np.sqrt(m)
    prec = rng.uniform(0.5, 2.0, size=m)
    y = Phi @ rng.normal(size=m) + np.sqrt(sigma2) * rng.normal(size=n)
    ex = BasisExpansion.dictionary(Hyperparameters.create(1, noise_variance=sigma2), prec, phi=Phi)
    cfg = TrainConfig(chevron_k=m, iterations=5000, full_batch=True, n_bar=0, learn_hyper=False,
                      lr_variational=1.0, decay_factor=10.0, log_every=5000)
    ts, _ = train(TrainData(None, y), ex, cfg)
    S = np.diag(prec)
    mu_star, _ = exact_posterior(Phi, S, y, sigma2)
    assert np.max(np.abs(ts.state.mu - mu_star)) <= 1e-3
    elbo = exact_elbo(Phi, S, y, sigma2, ts.state.mu, ts.state.dense()).elbo
    assert abs(elbo - log_marginal_likelihood(Phi, S, y, sigma2)) <= 1e-3
    assert time.perf_counter() - start <= 60.0


# 8 ---------------------------------------------------------------------------

def _median_step_ms(m, steps=40):
    rng = np.random.default_rng(8)
    n = 2000
    X = rng.normal(size=(n, 2))
    y = np.sin(X[:, 0])
    ex = BasisExpansion.rff(m, Hyperparameters.create(2), seed=0)
    cfg = TrainConfig(m_tilde=256, n_tilde=128, n_bar=0, chevron_k=10, iterations=steps + 5, init_rows=4)
    data = TrainData(X, y)
    ts = init_training(data, ex, cfg)
    times = []
    for t in range(1, steps + 6):
        t0 = time.perf_counter()
        sgd_step(ts, data, t)
        if t > 5:
            times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


@criterion(8)
def test_step_cost_independent_of_m():
    start = time.perf_counter()
    small = _median_step_ms(10_000)
    large = _median_step_ms(1_000_000)
    assert large <= 2.0 * small, (small, large)
    assert time.perf_counter() - start <= 120.0


# 9 ---------------------------------------------------------------------------

@criterion(9)
def test_augmentation_on_sinc():
    X, y = datamod.sinc_demo(0)
    ds = datamod.make_dataset(X, y)
    ex = BasisExpansion.inducing(ds.X, Hyperparameters.create(1, 0.3, 1.0, 0.1))
    cfg = TrainConfig(m_tilde=100, n_tilde=100, n_bar=100, chevron_k=10, iterations=2000, lr_hyper=0.0)
    ts, _ = train(TrainData(ds.X, ds.y), ex, cfg)
    grid = ds.standardization.transform_x(np.linspace(-6, 6, 200)[:, None])
    r = predict_augmented(ts.state, ts.expansion, grid)
    assert np.all(r.augmented_variance >= r.variance)
    far = predict_augmented(ts.state, ts.expansion, ds.standardization.transform_x(np.array([[10.0], [-10.0]])))
    assert np.all(np.abs(far.augmented_variance - ts.expansion.hyper.signal_variance) <= 1e-3)


# 10 --------------------------------------------------------------------------

@criterion(10)
@pytest.mark.slow
def test_relevance_vector_sparsity():
    start = time.perf_counter()
    X, y = datamod.sinc_demo(0)
    ds = datamod.make_dataset(X, y)
    ex = BasisExpansion.dictionary(Hyperparameters.create(1, 0.5, 1.0, 0.1), np.ones(ds.n), centers=ds.X)
    cfg = TrainConfig(m_tilde=250, n_tilde=100, n_bar=250, chevron_k=10, iterations=40_000, lr_variational=0.03,
                      lr_chevron_scale=0.1, lr_precision=0.1, decay_factor=10.0, log_every=40_000)
    ts, _ = train(TrainData(ds.X, ds.y), ex, cfg, rvm=True)
    pruned = rvm_prune(ts.rvm, ts.state, ts.expansion)
    elapsed = time.perf_counter() - start
    print(f"relevance vectors: {pruned.keep.size} after {elapsed:.0f} s")
    assert elapsed <= 600.0
    assert pruned.keep.size <= 50


# 11 --------------------------------------------------------------------------

@criterion(11)
def test_two_blob_classification():
    X, y = datamod.blobs_demo(0, n=400)
    ds = datamod.make_dataset(X, y, likelihood=LOGISTIC)
    ex = BasisExpansion.rff(512, Hyperparameters.create(ds.d), seed=0)
    cfg = TrainConfig(m_tilde=64, n_tilde=32, chevron_k=10, iterations=1000, likelihood=LOGISTIC, quad_points=101)
    ts, _ = train(TrainData(ds.X, ds.y), ex, cfg)
    acc = evaluate(predict(ts.state, ts.expansion, ds.X), ds.y, LOGISTIC).accuracy
    assert acc >= 0.95, acc


# 12 --------------------------------------------------------------------------

def _metric_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    drop = header.index("step_wall_ms")
    return [[c for a, c in enumerate(ln.split(",")) if a != drop] for ln in lines]


@criterion(12)
def test_reproducible_runs_and_round_trip(tmp_path):
    X, y = datamod.sinc_demo(3, n=300)
    data = tmp_path / "d.csv"
    np.savetxt(data, np.column_stack([X, y]), delimiter=",")
    args = ["train", "--data", str(data), "--m", "200", "--mtilde", "32", "--ntilde", "32", "--cv-rank", "50",
            "--iters", "300", "--log-every", "25", "--seed", "11", "--lr-hyper", "1e-3"]
    for tag in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / f"{tag}.bin"), "--metrics", str(tmp_path / f"{tag}.csv")]) == 0
    assert _metric_rows(tmp_path / "a.csv") == _metric_rows(tmp_path / "b.csv")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    art = ModelArtifact.load(tmp_path / "a.bin")
    art.save(tmp_path / "c.bin")
    back = ModelArtifact.load(tmp_path / "c.bin")
    Xs = art.standardization().transform_x(np.linspace(-6, 6, 50)[:, None])
    p, q = predict(art.state(), art.expansion(), Xs), predict(back.state(), back.expansion(), Xs)
    assert np.array_equal(p.mean, q.mean) and np.array_equal(p.variance, q.variance)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-rN"]))
