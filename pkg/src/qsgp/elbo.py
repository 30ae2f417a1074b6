"""Dense reference computations of the ELBO and the conjugate posterior.

Everything here is ``O(n m^2 + m^3)`` and meant for small instances: it is
the oracle the stochastic estimators are checked against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidState, NumericError
from .sites import GAUSSIAN, SiteProjection, gauss_hermite

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ExactElboTerms:
    l_mu: float
    l_sigma: float
    l_const: float

    @property
    def elbo(self) -> float:
        return -0.5 * (self.l_mu + self.l_sigma + self.l_const)


def _chol(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix is not positive definite") from exc


def _check_factor(C):
    C = np.asarray(C, dtype=np.float64)
    if np.any(np.diag(C) <= 0):
        raise InvalidState("Cholesky factor needs a strictly positive diagonal")
    return np.tril(C)


def exact_l_mu(Phi, S, y, sigma2, mu) -> float:
    f = Phi @ mu
    return float((-2.0 * y @ f + f @ f) / sigma2 + mu @ S @ mu)


def exact_l_sigma(Phi, S, sigma2, C) -> float:
    C = _check_factor(C)
    PC = Phi @ C
    return float(np.sum(PC * PC) / sigma2 + np.sum(S * (C @ C.T)) - 2.0 * np.sum(np.log(np.diag(C))))


def exact_l_const(S, y, sigma2) -> float:
    m = S.shape[0]
    n = y.shape[0]
    logdet_S = 2.0 * np.sum(np.log(np.diag(_chol(S))))
    log_det_2pi_Sinv = m * _LOG_2PI - logdet_S
    return float(log_det_2pi_Sinv - m * _LOG_2PI - m + n * (_LOG_2PI + np.log(sigma2)) + y @ y / sigma2)


def exact_elbo(Phi, S, y, sigma2, mu, C) -> ExactElboTerms:
    """The three closed-form terms of the Gaussian-likelihood ELBO."""
    Phi = np.asarray(Phi, dtype=np.float64).reshape(len(y), len(mu))
    S = np.asarray(S, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    l_sigma = exact_l_sigma(Phi, S, sigma2, C)
    return ExactElboTerms(exact_l_mu(Phi, S, y, sigma2, mu), l_sigma, exact_l_const(S, y, sigma2))


def exact_elbo_grads(Phi, S, y, sigma2, mu, C):
    """Gradients of ``l_mu`` w.r.t. ``mu`` and of ``l_sigma`` w.r.t. the lower triangle of ``C``."""
    C = _check_factor(C)
    G = Phi.T @ Phi / sigma2 + S
    g_mu = 2.0 * (G @ mu) - 2.0 * Phi.T @ y / sigma2
    g_C = np.tril(2.0 * G @ C) - 2.0 * np.diag(1.0 / np.diag(C))
    return g_mu, g_C


def exact_posterior(Phi, S, y, sigma2):
    """Closed-form Gaussian posterior ``(mu*, Sigma*)`` over the weights."""
    Phi = np.asarray(Phi, dtype=np.float64)
    A = Phi.T @ Phi / sigma2 + np.asarray(S, dtype=np.float64)
    L = _chol(0.5 * (A + A.T))
    Sigma = scipy.linalg.cho_solve((L, True), np.eye(A.shape[0]))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = Sigma @ (Phi.T @ y) / sigma2
    return mu, Sigma


def log_marginal_likelihood(Phi, S, y, sigma2) -> float:
    """``log N(y | 0, Phi S^-1 Phi^T + sigma2 I)``."""
    Phi = np.asarray(Phi, dtype=np.float64)
    n = len(y)
    LS = _chol(S)
    V = scipy.linalg.solve_triangular(LS, Phi.T, lower=True)
    K = V.T @ V + sigma2 * np.eye(n)
    L = _chol(K)
    a = scipy.linalg.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI)


def expected_log_lik_1d(site: SiteProjection, row: int, phi_row, mu, Sigma=None, C=None, quad_points=101) -> float:
    """Gauss-Hermite value of ``E_z[log g_l(phi mu + z * phi Sigma phi^T)]``.

    The ``z`` coefficient is the projected variance itself, as in the
    printed one-dimensional form the lower-bound estimator targets.
    """
    phi_row = np.asarray(phi_row, dtype=np.float64)
    if Sigma is None:
        if C is None:
            raise ValueError("need Sigma or C")
        v = phi_row @ np.asarray(C)
        var = float(v @ v)
    else:
        var = float(phi_row @ np.asarray(Sigma) @ phi_row)
    mean = float(phi_row @ mu)
    nodes, weights = gauss_hermite(quad_points)
    u = mean + nodes * var
    return float(weights @ site.log_g(u[None, :], rows=np.asarray([row]))[0])


def expected_log_lik(site: SiteProjection, Phi, mu, C, quad_points=101) -> float:
    """Sum over rows of :func:`expected_log_lik_1d`."""
    PC = Phi @ C
    var = np.sum(PC * PC, axis=1)
    mean = Phi @ mu
    nodes, weights = gauss_hermite(quad_points)
    u = mean[:, None] + var[:, None] * nodes[None, :]
    return float(np.sum(site.log_g(u) @ weights))


def kl_to_prior(S, mu, C) -> float:
    """``KL(N(mu, CC^T) || N(0, S^-1))``."""
    C = _check_factor(C)
    m = len(mu)
    logdet_S = 2.0 * np.sum(np.log(np.diag(_chol(S))))
    return float(0.5 * (np.sum(S * (C @ C.T)) + mu @ S @ mu - m - 2.0 * np.sum(np.log(np.diag(C))) - logdet_S))


def exact_elbo_bound(site: SiteProjection, Phi, S, mu, C, quad_points=101) -> float:
    """ELBO for a general site projection using the one-dimensional quadrature form."""
    return expected_log_lik(site, Phi, mu, C, quad_points) - kl_to_prior(S, mu, C)


def is_gaussian(site: SiteProjection) -> bool:
    return site.likelihood == GAUSSIAN
