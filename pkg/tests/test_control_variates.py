import numpy as np
import pytest

from qsgp.chevron import VariationalState
from qsgp.control_variates import (
    MU,
    ControlVariateState,
    LinearControlVariate,
    NystromControlVariate,
    cv_expectation_with_sparse_grad_scaling,
    cv_linear_correction,
    cv_nystrom_correction,
    cv_quadratic_correction,
    cv_update_running,
    init_control_variate,
    precompute_phi_t_y,
    support_rows,
)
from qsgp.errors import InvalidState, UnsupportedOperation
from qsgp.estimators import BatchFeatures, sample_batch
from qsgp.features import BasisExpansion, Hyperparameters, se_ard_gram


def _state(rng, m, k=0, scale=1.0):
    return VariationalState(rng.normal(size=m) * scale, np.zeros(m), np.tril(rng.normal(size=(m, k)), -1))


def _dict_problem(rng, n, m, k=0):
    Phi = rng.normal(size=(n, m)) / np.sqrt(m)
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), np.ones(m), phi=Phi)
    return Phi, ex, _state(rng, m, k)


def _mean_se(v):
    v = np.asarray(v)
    return v.mean(axis=0), v.std(axis=0, ddof=1) / np.sqrt(len(v))


def test_support_rows_distinct_and_seeded():
    p = support_rows(3, 100, 20)
    assert len(np.unique(p)) == 20
    assert np.array_equal(p, support_rows(3, 100, 20))
    with pytest.raises(ValueError):
        support_rows(0, 5, 6)


def test_zero_mean_start_gives_zero_running_vector(rng):
    _, ex, st = _dict_problem(rng, 30, 10, k=2)
    st.mu[:] = 0.0
    cv = init_control_variate(st, ex, None, 30, 8)
    assert np.all(cv.a_mu == 0.0)


def test_zero_vector_gives_zero_correction(rng):
    _, ex, st = _dict_problem(rng, 30, 10)
    st.mu[:] = 0.0
    cv = init_control_variate(st, ex, None, 30, 8)
    e = cv_quadratic_correction(sample_batch((0, 0), 30, 10, 4, 5), cv, st, 0.2)
    assert e.value == 0.0
    assert np.all(e.mu_grad == 0.0)


def test_disabled_support_set(rng):
    _, ex, st = _dict_problem(rng, 10, 4)
    assert init_control_variate(st, ex, None, 10, 0) is None


def test_stale_running_vector_rejected(rng):
    _, ex, st = _dict_problem(rng, 20, 6)
    cv = init_control_variate(st, ex, None, 20, 5)
    st.version += 1
    with pytest.raises(InvalidState):
        cv_quadratic_correction(sample_batch((0, 0), 20, 6, 2, 2), cv, st, 1.0)


def test_identical_rows_remove_row_variance(rng):
    n, m, sigma2 = 25, 7, 0.4
    Phi = np.tile(rng.normal(size=m), (n, 1))
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), np.ones(m), phi=Phi)
    st = _state(rng, m)
    cv = init_control_variate(st, ex, None, n, 6)
    mt, nt = 3, 4
    total = []
    for t in range(200):
        b = sample_batch((1, t), n, m, mt, nt)
        f = BatchFeatures(ex, None, b)
        quad = n * m * m / (sigma2 * nt * mt * mt) * float((f.phi_j @ st.mu[b.j]) @ (f.phi_i @ st.mu[b.i]))
        total.append(quad + cv_quadratic_correction(b, cv, st, sigma2).value)
    assert np.allclose(total, n / sigma2 * float(Phi[0] @ st.mu) ** 2, rtol=1e-10)


def test_quadratic_correction_zero_mean(rng):
    n, m = 200, 50
    _, ex, st = _dict_problem(rng, n, m, k=2)
    cv = init_control_variate(st, ex, None, n, 50, seed=4)
    for target in (MU, 1):
        vals = [cv_quadratic_correction(sample_batch((2, t), n, m, 5, 5), cv, st, 0.5, target).value
                for t in range(20_000)]
        mean, se = _mean_se(vals)
        assert abs(mean) <= 4 * se


def test_null_update_leaves_running_vector(rng):
    _, ex, st = _dict_problem(rng, 20, 6)
    cv = init_control_variate(st, ex, None, 20, 5)
    before = cv.a_mu.copy()
    cv_update_running(cv, [1, 3], st.mu[[1, 3]], st.mu[[1, 3]])
    assert np.array_equal(cv.a_mu, before)


def test_update_dimension_mismatch(rng):
    _, ex, st = _dict_problem(rng, 20, 6)
    cv = init_control_variate(st, ex, None, 20, 5)
    with pytest.raises(ValueError):
        cv_update_running(cv, [1, 2], [0.0], [1.0])


def test_recurrence_matches_direct_recomputation(rng):
    n, m, nb, k = 100, 40, 20, 3
    Phi, ex, st = _dict_problem(rng, n, m, k)
    cv = init_control_variate(st, ex, None, n, nb, seed=1)
    for _ in range(500):
        idx = np.unique(rng.integers(0, m, size=5))
        old = st.mu[idx].copy()
        st.mu[idx] += rng.normal(size=len(idx))
        cv_update_running(cv, idx, old, st.mu[idx])
        old_c = st.head_columns(idx, np.arange(k))
        st.lower[idx] += np.tril(rng.normal(size=(m, k)), -1)[idx] * 0.1
        cv_update_running(cv, idx, old_c, st.head_columns(idx, np.arange(k)))
    assert np.max(np.abs(cv.a_mu - Phi[cv.p] @ st.mu)) <= 1e-9
    assert np.max(np.abs(cv.a_cols - Phi[cv.p] @ st.dense()[:, :k])) <= 1e-9


def test_sparse_gradient_scaling_full_touch(rng):
    n, m = 40, 12
    Phi, ex, st = _dict_problem(rng, n, m)
    cv = init_control_variate(st, ex, None, n, 10)
    val, g = cv_expectation_with_sparse_grad_scaling(cv, 0.5, n, 10, np.arange(m), m)
    a = Phi[cv.p] @ st.mu
    assert val == pytest.approx(n / (0.5 * 10) * a @ a)
    assert np.allclose(g, 2 * n / (0.5 * 10) * Phi[cv.p].T @ a)


def test_sparse_gradient_scaling_zero_running_vector(rng):
    _, ex, st = _dict_problem(rng, 20, 8)
    st.mu[:] = 0.0
    cv = init_control_variate(st, ex, None, 20, 5)
    val, g = cv_expectation_with_sparse_grad_scaling(cv, 1.0, 20, 5, [0, 3], 8)
    assert val == 0.0 and np.all(g == 0.0)


def test_sparse_gradient_scaling_is_unbiased(rng):
    n, m, nb = 40, 30, 10
    Phi, ex, st = _dict_problem(rng, n, m)
    cv = init_control_variate(st, ex, None, n, nb)
    _, dense = cv_expectation_with_sparse_grad_scaling(cv, 1.0, n, nb, np.arange(m), m)
    draws = np.empty((50_000, m))
    for t in range(len(draws)):
        T = rng.choice(m, size=6, replace=False)
        _, g = cv_expectation_with_sparse_grad_scaling(cv, 1.0, n, nb, T, m)
        draws[t] = 0.0
        draws[t, T] = g
    mean, se = _mean_se(draws)
    assert np.all(np.abs(mean - dense) <= 4 * se)


def _inducing(rng, n, d=1):
    X = rng.uniform(-2, 2, size=(n, d))
    return X, BasisExpansion.inducing(X, Hyperparameters.create(d, 0.7))


def test_nystrom_needs_inducing(rng):
    _, ex, _ = _dict_problem(rng, 5, 3)
    with pytest.raises(UnsupportedOperation):
        NystromControlVariate(np.zeros((2, 1)), ex)


def test_nystrom_zero_vector(rng):
    X, ex = _inducing(rng, 20)
    st = VariationalState(np.zeros(20), np.zeros(20), np.zeros((20, 0)))
    cv = NystromControlVariate(X[:5], ex).recompute(st)
    assert cv_nystrom_correction(sample_batch((0, 0), 20, 20, 4, 4), cv, st).value == 0.0


def test_nystrom_full_support_is_exact(rng):
    X, ex = _inducing(rng, 12)
    st = _state(rng, 12)
    cv = NystromControlVariate(X, ex, jitter=1e-12).recompute(st)
    K = se_ard_gram(X, X, ex.hyper)
    assert cv.a_mu @ cv.a_mu == pytest.approx(st.mu @ K @ st.mu, rel=1e-6)


def test_nystrom_reduces_variance(rng):
    n = 150
    X, ex = _inducing(rng, n)
    st = _state(rng, n, scale=0.3)
    cv = NystromControlVariate(X[support_rows(0, n, 30)], ex).recompute(st)
    K = se_ard_gram(X, X, ex.hyper)
    mt = 10
    base, corr = [], []
    for t in range(10_000):
        b = sample_batch((3, t), n, n, mt, 1)
        base.append((n / mt) ** 2 * st.mu[b.i] @ K[np.ix_(b.i, b.j)] @ st.mu[b.j])
        corr.append(cv_nystrom_correction(b, cv, st).value)
    base, corr = np.array(base), np.array(corr)
    mean, se = _mean_se(corr)
    assert abs(mean) <= 4 * se
    assert np.var(base + corr) <= np.var(base)


def test_linear_correction_zero_mean_and_cancellation(rng):
    n, m = 100, 40
    Phi, ex, st = _dict_problem(rng, n, m)
    y = rng.normal(size=n)
    b = precompute_phi_t_y(ex, None, y)
    assert np.allclose(b, Phi.T @ y)
    lin = LinearControlVariate(b, st.mu)
    assert cv_linear_correction(sample_batch((0, 0), n, m, m, n, enumerate_all=True), lin, 0.3, st.mu).value \
        == pytest.approx(0.0, abs=1e-10)
    vals = [cv_linear_correction(sample_batch((5, t), n, m, 4, 4), lin, 0.3, st.mu).value for t in range(20_000)]
    mean, se = _mean_se(vals)
    assert abs(mean) <= 4 * se


def test_linear_correction_zero_mean_vector(rng):
    lin = LinearControlVariate(rng.normal(size=6), np.zeros(6))
    assert cv_linear_correction(sample_batch((0, 0), 5, 6, 3, 2), lin, 1.0, np.zeros(6)).value == 0.0
    with pytest.raises(UnsupportedOperation):
        cv_linear_correction(sample_batch((0, 0), 5, 6, 3, 2), None, 1.0, np.zeros(6))


def test_frozen_features_ignore_later_hyper_changes(rng):
    X = rng.normal(size=(30, 1))
    ex = BasisExpansion.rff(10, Hyperparameters.create(1), seed=0)
    st = _state(rng, 10)
    cv = init_control_variate(st, ex, X, 30, 5)
    assert isinstance(cv, ControlVariateState)
    assert cv.frozen_hyper == ex.hyper
    assert cv.frozen_hyper != ex.with_hyper(Hyperparameters.create(1, 2.0)).hyper
