"""Control variates for the quadratic data terms.

A fixed support set of ``n_bar`` rows gives a cheap stand-in for the full
quadratic form ``|Phi v|^2``.  The stochastic part is sampled with the same
basis indices as the estimator it corrects, while the deterministic part
``|a|^2`` is read from a running vector ``a = F v`` that is kept current
through sparse rank updates.  ``F`` is ``Phi[p, :]`` for the quadratic
correction and whitened Nystrom features for the prior term.

Every correction has expectation zero over index draws, so adding it to an
unbiased estimate keeps the estimate unbiased.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.linalg

from . import _rng
from .chevron import VariationalState
from .errors import InvalidState, NumericError, UnsupportedOperation
from .estimators import IndexBatch, StochasticEstimate, _EMPTY_F, _EMPTY_I
from .features import INDUCING, BasisExpansion, feature_block, se_ard_gram

_SUPPORT_STREAM = 0x5077

MU = "mu"


def support_rows(seed, n, n_bar) -> np.ndarray:
    """``n_bar`` distinct row indices, uniform without replacement, fixed by ``seed``."""
    if not 0 < n_bar <= n:
        raise ValueError("need 0 < n_bar <= n")
    u = _rng.uniform(_rng.key(seed, _SUPPORT_STREAM), np.arange(n, dtype=np.uint64))
    return np.sort(np.argsort(u, kind="stable")[:n_bar])


class _RunningProjection:
    """Running vectors ``F v`` for ``mu`` and for each dense chevron column."""

    def __init__(self, m: int, rows: int, k: int):
        self.m = m
        self.a_mu = np.zeros(rows)
        self.a_cols = np.zeros((rows, k))
        self.version = 0

    def block(self, cols) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def _weights(self, batch: IndexBatch, sigma2):
        """``(stochastic weight, deterministic weight)``."""
        raise NotImplementedError

    @property
    def k(self) -> int:
        return self.a_cols.shape[1]

    def running(self, target):
        return self.a_mu if target == MU else self.a_cols[:, target]

    def recompute(self, state: VariationalState, chunk=4096):
        """Direct ``F mu`` and ``F C[:, :k]``, chunked over basis columns."""
        self.a_mu[:] = 0.0
        self.a_cols[:] = 0.0
        k = self.k
        for lo in range(0, self.m, chunk):
            cols = np.arange(lo, min(lo + chunk, self.m))
            F = self.block(cols)
            self.a_mu += F @ state.mu[cols]
            if k:
                self.a_cols += F @ state.head_columns(cols, np.arange(k))
        self.version = state.version
        return self

    def check(self, state: VariationalState):
        if state.version != self.version:
            raise InvalidState(
                f"running vectors are at version {self.version}, state is at {state.version}")

    def update(self, touched, old_vals, new_vals, version: Optional[int] = None):
        """``a += F[:, touched] (new - old)``.

        1-D values update ``a_mu``; 2-D values of shape ``(len(touched), k)``
        update every dense-column vector.
        """
        touched = np.asarray(touched, dtype=np.int64)
        old_vals = np.asarray(old_vals, dtype=np.float64)
        new_vals = np.asarray(new_vals, dtype=np.float64)
        if old_vals.shape != new_vals.shape or old_vals.shape[:1] != touched.shape:
            raise ValueError("touched indices and old/new values are misaligned")
        if old_vals.ndim == 2 and old_vals.shape[1] != self.k:
            raise ValueError("column updates need one value per dense column")
        if touched.size:
            F = self.block(touched)
            delta = new_vals - old_vals
            if delta.ndim == 1:
                self.a_mu += F @ delta
            else:
                self.a_cols += F @ delta
        if version is not None:
            self.version = version
        return self

    # -- corrections ---------------------------------------------------
    def _touched(self, batch):
        uniq, inv = np.unique(np.concatenate([batch.i, batch.j]), return_inverse=True)
        mt = len(batch.i)
        return uniq, inv[:mt], inv[mt:]

    def correction(self, batch: IndexBatch, state: VariationalState, sigma2, targets=(MU,),
                   col_scale=None) -> StochasticEstimate:
        """Sum of corrections for ``targets`` (``MU`` and/or dense column indices).

        Column targets are multiplied by ``col_scale`` (default ``m / m_tilde``),
        mirroring the column sub-sampling of the covariance estimator.
        """
        self.check(state)
        w_s, w_d = self._weights(batch, sigma2)
        T, inv_i, inv_j = self._touched(batch)
        FT = self.block(T)
        Fi, Fj = FT[:, inv_i], FT[:, inv_j]
        sparse = self.m / len(T)
        i, j = batch.i, batch.j
        if col_scale is None:
            col_scale = self.m / len(i)

        value = 0.0
        mu_idx, mu_grad, c_rows, c_cols, c_grad = [], [], [], [], []
        for t in targets:
            if t == MU:
                vi, vj, a, s = state.mu[i], state.mu[j], self.a_mu, 1.0
            else:
                if not 0 <= t < self.k:
                    raise IndexError("column target must be a dense chevron column")
                col = np.array([t])
                vi = state.head_columns(i, col)[:, 0]
                vj = state.head_columns(j, col)[:, 0]
                a, s = self.a_cols[:, t], col_scale
            pi, pj = Fi @ vi, Fj @ vj
            value += s * (-w_s * float(pi @ pj) + w_d * float(a @ a))
            gi = -s * w_s * (Fi.T @ pj)
            gj = -s * w_s * (Fj.T @ pi)
            gT = s * sparse * 2.0 * w_d * (FT.T @ a)
            idx = np.concatenate([i, j, T])
            g = np.concatenate([gi, gj, gT])
            if t == MU:
                mu_idx.append(idx)
                mu_grad.append(g)
            else:
                keep = idx >= t
                c_rows.append(idx[keep])
                c_cols.append(np.full(int(keep.sum()), t))
                c_grad.append(g[keep])

        def cat(parts, empty):
            return np.concatenate(parts) if parts else empty

        return StochasticEstimate(value, cat(mu_idx, _EMPTY_I), cat(mu_grad, _EMPTY_F),
                                  cat(c_rows, _EMPTY_I), cat(c_cols, _EMPTY_I), cat(c_grad, _EMPTY_F))


class ControlVariateState(_RunningProjection):
    """Support rows ``p`` with running ``Phi[p, :] mu`` and ``Phi[p, :] c_r``.

    Features are evaluated with the expansion captured at construction, so
    later hyperparameter changes do not invalidate the running vectors.
    """

    def __init__(self, p, expansion: BasisExpansion, X, n: int, k: int):
        p = np.asarray(p, dtype=np.int64).copy()
        p.setflags(write=False)
        self.p = p
        self.expansion = expansion
        self.X = X
        self.n = int(n)
        super().__init__(expansion.m, len(p), k)

    @property
    def n_bar(self) -> int:
        return len(self.p)

    @property
    def frozen_hyper(self):
        return self.expansion.hyper

    def block(self, cols):
        return feature_block(self.expansion, self.X, self.p, cols)

    def _weights(self, batch, sigma2):
        n, m, mt, nb = float(self.n), float(self.m), float(batch.m_tilde), float(self.n_bar)
        return n * m * m / (sigma2 * nb * mt * mt), n / (sigma2 * nb)


def init_control_variate(state: VariationalState, expansion: BasisExpansion, X, n: int, n_bar: int,
                         seed: int = 0) -> Optional[ControlVariateState]:
    """Draw the support set and compute the running vectors; ``n_bar = 0`` disables (returns None)."""
    if n_bar == 0:
        return None
    n_bar = min(int(n_bar), int(n))
    cv = ControlVariateState(support_rows(seed, n, n_bar), expansion, X, n, state.k)
    return cv.recompute(state)


def cv_quadratic_correction(batch: IndexBatch, cv: ControlVariateState, state: VariationalState, sigma2,
                            target=MU) -> StochasticEstimate:
    """Correction for the quadratic data term of ``target`` (``MU`` or a dense column).

    Returns ``-(n m^2)/(sigma2 n_bar m_tilde^2) v_j^T Phi_pj^T Phi_pi v_i + n/(sigma2 n_bar) a^T a``
    (column targets without the ``m / m_tilde`` column factor) with sparse gradients.
    """
    return cv.correction(batch, state, sigma2, (target,), col_scale=1.0)


def cv_l_mu_correction(batch, cv: ControlVariateState, state, sigma2) -> StochasticEstimate:
    return cv.correction(batch, state, sigma2, (MU,))


def cv_l_sigma_correction(batch, cv: ControlVariateState, state, sigma2) -> StochasticEstimate:
    """Corrections for every sampled dense column, each scaled by ``m / m_tilde``."""
    targets = [int(r) for r in batch.r if r < cv.k]
    if not targets:
        return StochasticEstimate(0.0)
    return cv.correction(batch, state, sigma2, targets)


def cv_update_running(cv: _RunningProjection, touched, old_vals, new_vals, version=None):
    """Rank update ``a <- a + F[:, touched] (new - old)`` at cost ``O(n_bar |touched|)``."""
    return cv.update(touched, old_vals, new_vals, version)


def cv_expectation_with_sparse_grad_scaling(cv: _RunningProjection, sigma2, n, n_bar, touched, m,
                                            target=MU):
    """Value ``n/(sigma2 n_bar) a^T a`` and its gradient restricted to ``touched``.

    The restricted gradient is scaled by ``m / |touched|``; for a touched set
    whose law is exchangeable over coordinates its mean is the dense gradient.
    """
    touched = np.asarray(touched, dtype=np.int64)
    if touched.size < 1:
        raise ValueError("touched must be non-empty")
    a = cv.running(target)
    w = n / (sigma2 * n_bar)
    grad = (m / touched.size) * 2.0 * w * (cv.block(touched).T @ a)
    return w * float(a @ a), grad


class NystromControlVariate(_RunningProjection):
    """Nystrom stand-in for the prior term ``v^T K v`` of an inducing-point expansion.

    Uses whitened features ``L^-1 K(U, Z)`` with ``L L^T = K(U, U)``.
    """

    def __init__(self, U, expansion: BasisExpansion, k: int = 0, jitter: float = 1e-8):
        if expansion.kind != INDUCING:
            raise UnsupportedOperation("the Nystrom correction needs an inducing_point expansion")
        self.U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        self.expansion = expansion
        Kuu = se_ard_gram(self.U, self.U, expansion.hyper)
        scale = expansion.hyper.signal_variance
        try:
            self.L = np.linalg.cholesky(Kuu + jitter * scale * np.eye(len(self.U)))
        except np.linalg.LinAlgError:
            try:
                self.L = np.linalg.cholesky(Kuu + 1e3 * jitter * scale * np.eye(len(self.U)))
            except np.linalg.LinAlgError as exc:
                raise NumericError("K(U, U) is not positive definite") from exc
        super().__init__(expansion.m, len(self.U), k)

    def block(self, cols):
        Kuz = se_ard_gram(self.U, self.expansion.inducing_inputs[np.asarray(cols)], self.expansion.hyper)
        return scipy.linalg.solve_triangular(self.L, Kuz, lower=True)

    def _weights(self, batch, sigma2):
        m, mt = float(self.m), float(batch.m_tilde)
        return m * m / (mt * mt), 1.0


def cv_nystrom_correction(batch: IndexBatch, cv: NystromControlVariate, state: VariationalState,
                          target=MU) -> StochasticEstimate:
    """``-(m^2/m_tilde^2) v_i^T K_iU K_UU^-1 K_Uj v_j + v^T K_XU K_UU^-1 K_UX v`` with sparse gradients."""
    return cv.correction(batch, state, 1.0, (target,), col_scale=1.0)


class LinearControlVariate:
    """Correction for the linear data term using a precomputed ``b = Phi^T y``."""

    def __init__(self, b, mu):
        self.b = np.asarray(b, dtype=np.float64)
        self.b_mu = float(self.b @ np.asarray(mu))

    def update(self, touched, old_vals, new_vals):
        touched = np.asarray(touched, dtype=np.int64)
        self.b_mu += float(self.b[touched] @ (np.asarray(new_vals) - np.asarray(old_vals)))
        return self


def cv_linear_correction(batch: IndexBatch, lin: Optional[LinearControlVariate], sigma2, mu,
                         touched=None) -> StochasticEstimate:
    """``(2m)/(sigma2 m_tilde) b_i^T mu_i - (2/sigma2) b^T mu``.

    The dense gradient ``-(2/sigma2) b`` is restricted to ``touched``
    (default ``unique(i)``) and scaled by ``m / |touched|``.
    """
    if lin is None:
        raise UnsupportedOperation("the linear correction needs a precomputed b = Phi^T y")
    m, mt = float(batch.m), float(batch.m_tilde)
    i = batch.i
    b_i = lin.b[i]
    value = 2.0 * m / (sigma2 * mt) * float(b_i @ np.asarray(mu)[i]) - 2.0 / sigma2 * lin.b_mu
    T = np.unique(i) if touched is None else np.asarray(touched, dtype=np.int64)
    g = np.concatenate([2.0 * m / (sigma2 * mt) * b_i, -(m / len(T)) * 2.0 / sigma2 * lin.b[T]])
    return StochasticEstimate(value, np.concatenate([i, T]), g)


def precompute_phi_t_y(expansion: BasisExpansion, X, y, chunk=4096) -> np.ndarray:
    """``Phi^T y`` in column chunks (``O(n m)`` once)."""
    y = np.asarray(y, dtype=np.float64)
    rows = np.arange(len(y))
    out = np.empty(expansion.m)
    for lo in range(0, expansion.m, chunk):
        cols = np.arange(lo, min(lo + chunk, expansion.m))
        out[cols] = feature_block(expansion, X, rows, cols).T @ y
    return out
