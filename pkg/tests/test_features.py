import numpy as np
import pytest

from qsgp.errors import UnsupportedOperation
from qsgp.features import (
    BasisExpansion,
    Hyperparameters,
    feature_block,
    feature_block_grad_hyper,
    features_at,
    prior_precision_block,
    prior_precision_diag,
    se_ard_kernel,
)


def test_kernel_zero_distance_gives_signal_variance():
    h = Hyperparameters.create(3, [0.5, 2.0, 1.0], signal_variance=2.5)
    x = np.array([0.3, -1.0, 4.0])
    assert se_ard_kernel(x, x, h) == pytest.approx(2.5, abs=1e-15)


def test_kernel_flat_limit():
    h = Hyperparameters.create(2, 1e9, signal_variance=1.7)
    assert abs(se_ard_kernel([0.0, 5.0], [3.0, -2.0], h) - 1.7) <= 1e-9


def test_kernel_unit_distance():
    h = Hyperparameters.create(1)
    assert se_ard_kernel([0.0], [1.0], h) == pytest.approx(0.6065306597126334, abs=1e-12)


def test_kernel_rejects_nan():
    with pytest.raises(ValueError):
        se_ard_kernel([np.nan], [0.0], Hyperparameters.create(1))


def test_rff_block_is_deterministic(rng):
    X = rng.normal(size=(20, 2))
    ex = BasisExpansion.rff(64, Hyperparameters.create(2), seed=3)
    rows, cols = np.array([0, 5, 7]), np.array([1, 2, 63])
    a = feature_block(ex, X, rows, cols)
    b = feature_block(BasisExpansion.rff(64, Hyperparameters.create(2), seed=3), X, rows, cols)
    assert np.array_equal(a, b)


def test_rff_block_matches_full_matrix_slice(rng):
    X = rng.normal(size=(15, 2))
    ex = BasisExpansion.rff(30, Hyperparameters.create(2, [0.7, 1.3]), seed=1)
    full = feature_block(ex, X, np.arange(15), np.arange(30))
    rows, cols = np.array([3, 3, 14, 0]), np.array([29, 0, 7])
    assert np.array_equal(feature_block(ex, X, rows, cols), full[np.ix_(rows, cols)])


def test_inducing_block_symmetric(rng):
    Z = rng.normal(size=(6, 2))
    ex = BasisExpansion.inducing(Z, Hyperparameters.create(2))
    P = feature_block(ex, Z, np.arange(6), np.arange(6))
    assert np.allclose(P, P.T)


def test_rff_approximates_kernel(rng):
    h = Hyperparameters.create(2, [0.8, 1.5], signal_variance=1.3)
    ex = BasisExpansion.rff(10_000, h, seed=0)
    X = rng.normal(size=(200, 2))
    Phi = feature_block(ex, X, np.arange(200), np.arange(ex.m))
    a, b = rng.integers(0, 200, size=(2, 100))
    approx = np.einsum("ij,ij->i", Phi[a], Phi[b])
    exact = np.array([se_ard_kernel(X[p], X[q], h) for p, q in zip(a, b)])
    assert np.max(np.abs(approx - exact)) <= 0.05


def test_rff_precision_is_identity_pattern():
    ex = BasisExpansion.rff(10, Hyperparameters.create(1))
    S = prior_precision_block(ex, [0, 3, 4], [3, 0, 9])
    assert np.array_equal(S, np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=float))


def test_inducing_precision_spd(rng):
    Z = rng.normal(size=(12, 2))
    ex = BasisExpansion.inducing(np.vstack([Z, Z[:2]]), Hyperparameters.create(2))
    S = prior_precision_block(ex, np.arange(14), np.arange(14))
    assert np.linalg.eigvalsh(S).min() > -1e-8


def test_dictionary_precision_stored():
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), [2.0, 3.0], phi=np.ones((4, 2)))
    assert np.allclose(prior_precision_block(ex, [0, 1], [0, 1]), np.diag([2.0, 3.0]))
    assert np.allclose(prior_precision_diag(ex, [1, 0]), [3.0, 2.0])


def test_index_out_of_range():
    ex = BasisExpansion.rff(4, Hyperparameters.create(1))
    with pytest.raises(IndexError):
        feature_block(ex, np.zeros((3, 1)), [0], [4])
    with pytest.raises(IndexError):
        feature_block(ex, np.zeros((3, 1)), [3], [0])


def test_dictionary_cannot_extrapolate():
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), [1.0], phi=np.ones((2, 1)))
    with pytest.raises(UnsupportedOperation):
        features_at(ex, np.zeros((1, 1)))


def test_grad_flat_lengthscale_vanishes(rng):
    ex = BasisExpansion.rff(16, Hyperparameters.create(2, 1e9), seed=2)
    X = rng.normal(size=(5, 2))
    G = feature_block_grad_hyper(ex, X, np.arange(5), np.arange(16))
    assert np.max(np.abs(G[:2])) <= 1e-6


def test_grad_signal_variance_is_half_phi(rng):
    ex = BasisExpansion.rff(8, Hyperparameters.create(2), seed=2)
    X = rng.normal(size=(4, 2))
    G = feature_block_grad_hyper(ex, X, np.arange(4), np.arange(8))
    assert np.allclose(G[2], 0.5 * feature_block(ex, X, np.arange(4), np.arange(8)))
    doubled = BasisExpansion.rff(8, Hyperparameters.create(2, signal_variance=2.0), seed=2)
    ratio = feature_block(doubled, X, np.arange(4), np.arange(8)) / feature_block(ex, X, np.arange(4), np.arange(8))
    assert np.allclose(ratio, np.sqrt(2.0))


def test_grad_matches_finite_differences(rng):
    h = Hyperparameters.create(2, [0.6, 1.4], signal_variance=0.8)
    ex = BasisExpansion.rff(12, h, seed=4)
    X = rng.normal(size=(6, 2))
    rows, cols = np.arange(6), np.arange(12)
    G = feature_block_grad_hyper(ex, X, rows, cols)
    eps = 1e-5
    for _ in range(5):
        p, a, b = rng.integers(0, 3), rng.integers(0, 6), rng.integers(0, 12)
        vec = h.to_vector()
        up, dn = vec.copy(), vec.copy()
        up[p] += eps
        dn[p] -= eps
        f = lambda v: feature_block(ex.with_hyper(Hyperparameters.from_vector(v)), X, [a], [b])[0, 0]
        fd = (f(up) - f(dn)) / (2 * eps)
        assert abs(fd - G[p, a, b]) <= 1e-4 * max(abs(fd), 1e-3)


def test_hyperparameters_reject_overflow():
    with pytest.raises(ValueError):
        Hyperparameters(np.array([0.0]), 1e6)


def test_hyper_vector_round_trip():
    h = Hyperparameters.create(3, [0.1, 2.0, 5.0], 1.5, 0.2, 0.7)
    assert Hyperparameters.from_vector(h.to_vector()) == h
