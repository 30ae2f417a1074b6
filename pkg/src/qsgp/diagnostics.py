"""Self-check reports on small synthetic instances.

Each report yields rows ``(report, term, mean, std_error, oracle, z)``.
Two-sided checks use ``z = (mean - oracle) / std_error``.  The one-sided
lower-bound check reports only upward violations, ``max(0, z)``.
"""
from __future__ import annotations

from typing import Iterable, List, NamedTuple

import numpy as np

from .chevron import VariationalState
from .control_variates import cv_quadratic_correction, init_control_variate
from .elbo import exact_elbo, exact_elbo_bound, exact_elbo_grads, kl_to_prior
from .estimators import (
    BatchFeatures,
    estimate_elbo_lower_bound,
    estimate_l_const,
    estimate_l_mu,
    estimate_l_sigma,
    sample_batch,
)
from .features import BasisExpansion, Hyperparameters, feature_block
from .sites import LOGISTIC, SiteProjection

COLUMNS = ("report", "term", "mean", "std_error", "oracle", "z")
FAIL_Z = 5.0


class Row(NamedTuple):
    report: str
    term: str
    mean: float
    std_error: float
    oracle: float
    z: float


def _z(mean, se, oracle):
    if se > 0:
        return (mean - oracle) / se
    return 0.0 if mean == oracle else float("inf")


class Instance(NamedTuple):
    expansion: BasisExpansion
    X: np.ndarray
    y: np.ndarray
    sigma2: float
    state: VariationalState
    Phi: np.ndarray
    S: np.ndarray


def conjugate_instance(seed=0, n=20, m=8, k=3) -> Instance:
    """Stored-dictionary regression instance with a random chevron state."""
    rng = np.random.default_rng(seed)
    Phi = rng.normal(size=(n, m)) / np.sqrt(m)
    prec = rng.uniform(0.5, 2.0, size=m)
    hyper = Hyperparameters.create(1, noise_variance=0.3)
    ex = BasisExpansion.dictionary(hyper, prec, phi=Phi)
    y = rng.normal(size=n)
    lower = np.tril(rng.normal(size=(m, k)) * 0.3, -1)
    st = VariationalState(rng.normal(size=m) * 0.5, rng.normal(size=m) * 0.3 - 0.5, lower)
    return Instance(ex, None, y, 0.3, st, Phi, np.diag(prec))


def _mc(values):
    v = np.asarray(values)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def unbiasedness_report(replicates=10000, seed=0, m_tilde=3, n_tilde=4) -> List[Row]:
    inst = conjugate_instance(seed)
    ex, st = inst.expansion, inst.state
    exact = exact_elbo(inst.Phi, inst.S, inst.y, inst.sigma2, st.mu, st.dense())
    n, m = inst.Phi.shape
    vals = np.empty((replicates, 3))
    for t in range(replicates):
        b = sample_batch((seed, t), n, m, m_tilde, n_tilde)
        f = BatchFeatures(ex, inst.X, b)
        vals[t, 0] = estimate_l_mu(b, ex, inst.X, inst.y, inst.sigma2, st.mu, feats=f, grads=False).value
        vals[t, 1] = estimate_l_sigma(b, ex, inst.X, inst.sigma2, st, feats=f, grads=False).value
        vals[t, 2] = estimate_l_const(b, ex, inst.y, inst.sigma2, grads=False).value
    rows = []
    for col, (term, oracle) in enumerate((("l_mu", exact.l_mu), ("l_sigma", exact.l_sigma),
                                          ("l_const", exact.l_const))):
        mean, se = _mc(vals[:, col])
        rows.append(Row("unbiasedness", term, mean, se, oracle, _z(mean, se, oracle)))
    return rows


def gradient_report(replicates=2000, seed=0, m_tilde=3, n_tilde=4) -> List[Row]:
    """Largest z-score of the stochastic gradient means against the exact gradients."""
    inst = conjugate_instance(seed)
    ex, st = inst.expansion, inst.state
    n, m = inst.Phi.shape
    g_mu, g_C = exact_elbo_grads(inst.Phi, inst.S, inst.y, inst.sigma2, st.mu, st.dense())
    mask = VariationalState.structural_mask(np.arange(m)[:, None], np.arange(m)[None, :], st.k)
    gm = np.empty((replicates, m))
    gc = np.empty((replicates, int(mask.sum())))
    for t in range(replicates):
        b = sample_batch((seed + 1, t), n, m, m_tilde, n_tilde)
        f = BatchFeatures(ex, inst.X, b)
        gm[t] = estimate_l_mu(b, ex, inst.X, inst.y, inst.sigma2, st.mu, feats=f).grad_mu_dense(m)
        gc[t] = estimate_l_sigma(b, ex, inst.X, inst.sigma2, st, feats=f).grad_c_dense(m)[mask]
    rows = []
    for term, G, exact in (("grad_mu", gm, g_mu), ("grad_C", gc, g_C[mask])):
        mean = G.mean(axis=0)
        se = G.std(axis=0, ddof=1) / np.sqrt(replicates)
        z = np.array([_z(a, s, o) for a, s, o in zip(mean, se, exact)])
        w = int(np.argmax(np.abs(z)))
        rows.append(Row("gradient", f"{term}[{w}]", float(mean[w]), float(se[w]), float(exact[w]), float(z[w])))
    return rows


def cv_variance_report(replicates=2000, seed=0, n=2000, m=500, m_tilde=50, n_tilde=50,
                       n_bars: Iterable[int] = (0, 50, 200, 500)) -> List[Row]:
    """Variance of the quadratic data term plus correction for several support sizes.

    ``mean`` holds the variance, ``oracle`` the uncorrected variance; the
    row for each ``n_bar`` also checks that the corrected mean matches the
    uncorrected one.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3.0, 3.0, size=(n, 2))
    ex = BasisExpansion.rff(m, Hyperparameters.create(2, 1.0, 1.0, 0.1), seed=seed)
    st = VariationalState(rng.normal(size=m) * 0.3, np.zeros(m), np.zeros((m, 0)))
    sigma2 = 0.1
    B = n * m * m / (sigma2 * n_tilde * m_tilde ** 2)
    batches = [sample_batch((seed + 2, t), n, m, m_tilde, n_tilde) for t in range(replicates)]
    base = np.empty(replicates)
    for t, b in enumerate(batches):
        f = BatchFeatures(ex, X, b)
        base[t] = B * float((f.phi_j @ st.mu[b.j]) @ (f.phi_i @ st.mu[b.i]))
    v0 = float(base.var(ddof=1))
    rows = []
    for nb in n_bars:
        if nb == 0:
            rows.append(Row("cv_variance", "n_bar=0", v0, float("nan"), v0, 0.0))
            continue
        cv = init_control_variate(st, ex, X, n, nb, seed)
        corr = np.array([cv_quadratic_correction(b, cv, st, sigma2).value for b in batches])
        mean, se = _mc(corr)
        rows.append(Row("cv_variance", f"n_bar={nb}", float((base + corr).var(ddof=1)), float("nan"), v0, 0.0))
        rows.append(Row("cv_zero_mean", f"n_bar={nb}", mean, se, 0.0, _z(mean, se, 0.0)))
    return rows


def jensen_report(replicates=4000, seed=0, n=12, m=8, m_tilde=2, n_tilde=4) -> List[Row]:
    """Lower-bound estimator mean against the exact one-dimensional expectation (logistic sites)."""
    rng = np.random.default_rng(seed)
    Phi = rng.normal(size=(n, m)) / np.sqrt(m)
    ex = BasisExpansion.dictionary(Hyperparameters.create(1), np.ones(m), phi=Phi)
    y = np.where(rng.normal(size=n) > 0, 1.0, -1.0)
    site = SiteProjection(LOGISTIC, y)
    st = VariationalState(rng.normal(size=m), rng.normal(size=m) * 0.3 - 0.5, np.zeros((m, 0)))
    # the bound minus its KL part is the expected log likelihood
    oracle = exact_elbo_bound(site, Phi, np.eye(m), st.mu, st.dense(), 21) + kl_to_prior(np.eye(m), st.mu, st.dense())
    vals = np.array([estimate_elbo_lower_bound(sample_batch((seed + 3, t), n, m, m_tilde, n_tilde),
                                               ex, None, site, st, 21).value for t in range(replicates)])
    mean, se = _mc(vals)
    return [Row("jensen", "logistic_lower_bound", mean, se, oracle, max(0.0, _z(mean, se, oracle)))]


def run_all(replicates=10000, seed=0) -> List[Row]:
    if replicates < 1:
        raise ValueError("replicates must be positive")
    rows = []
    rows += unbiasedness_report(replicates, seed)
    rows += gradient_report(max(replicates // 5, 2), seed)
    rows += cv_variance_report(max(replicates // 10, 2), seed)
    rows += jensen_report(max(replicates // 2, 2), seed)
    return rows


def failed(rows: Iterable[Row]) -> bool:
    return any(abs(r.z) > FAIL_Z for r in rows if np.isfinite(r.z))
