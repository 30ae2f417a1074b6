"""Quadruply stochastic ELBO estimators.

Each estimator sub-samples data rows ``l`` once and basis functions three
times (``i``, ``j``, ``r``), so its cost depends only on the mini-batch
sizes.  Values come with closed-form gradients with respect to the sampled
variational entries, the log precisions (diagonal ``S``) and the log
hyperparameters.

Gradient arrays are returned in coordinate form and may contain repeated
indices; repeated draws contribute with multiplicity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng
from .chevron import VariationalState
from .errors import InvalidState, UnsupportedOperation
from .features import (
    DICTIONARY,
    BasisExpansion,
    BlockFeatures,
    prior_precision_block,
    prior_precision_diag,
    _precision_diag,
)
from .sites import GAUSSIAN, LAPLACE, SiteProjection, gauss_hermite

_LOG_2PI = float(np.log(2.0 * np.pi))

_Z = 5


@dataclass(frozen=True)
class IndexBatch:
    """Index draws for one estimate: ``i``, ``j``, ``r`` over basis functions, ``l`` over rows."""

    i: np.ndarray
    j: np.ndarray
    r: np.ndarray
    l: np.ndarray
    n: int
    m: int
    z: Optional[float] = None
    rng_key: tuple = (0, 0)
    enumerated: bool = False
    checked: bool = field(default=False, compare=False)

    @property
    def m_tilde(self) -> int:
        return self.i.shape[0]

    @property
    def n_tilde(self) -> int:
        return self.l.shape[0]


def sample_batch(rng_key, n, m, m_tilde, n_tilde, need_z=False, enumerate_all=False) -> IndexBatch:
    """Draw an :class:`IndexBatch` as a pure function of ``rng_key = (seed, iteration)``.

    Indices are i.i.d. uniform with replacement.  ``enumerate_all`` returns
    every index in order instead and requires ``m_tilde == m`` and
    ``n_tilde == n``.
    """
    if m_tilde < 1 or n_tilde < 1:
        raise ValueError("mini-batch sizes must be positive")
    seed, it = rng_key
    k = _rng.key(seed, it)
    z = float(_rng.normal(_rng.key(k, _Z), [0])[0]) if need_z else None
    if enumerate_all:
        if m_tilde != m or n_tilde != n:
            raise ValueError("enumeration needs m_tilde == m and n_tilde == n")
        basis = np.arange(m)
        return IndexBatch(basis, basis, basis, np.arange(n), n, m, z, tuple(rng_key), True, True)
    # one hash pass: positions [0, 3 m_tilde) are i, j, r; the rest are l
    h = _rng.hash64(k, np.arange(3 * m_tilde + n_tilde, dtype=np.uint64))
    basis = (h[: 3 * m_tilde] % np.uint64(m)).astype(np.int64)
    rows = (h[3 * m_tilde:] % np.uint64(n)).astype(np.int64)
    return IndexBatch(basis[:m_tilde], basis[m_tilde: 2 * m_tilde], basis[2 * m_tilde:], rows,
                      n, m, z, tuple(rng_key), False, True)


_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0)


@dataclass
class StochasticEstimate:
    """A value plus sparse gradients.

    ``mu_grad[t]`` is the derivative w.r.t. ``mu[mu_idx[t]]``; ``c_grad[t]``
    w.r.t. ``C[c_rows[t], c_cols[t]]``; ``prec_grad[t]`` w.r.t.
    ``log s[prec_idx[t]]``.  ``hyper_grad`` follows the
    :class:`~qsgp.features.Hyperparameters` vector layout.
    """

    value: float
    mu_idx: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    mu_grad: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    c_rows: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    c_cols: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    c_grad: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    hyper_grad: Optional[np.ndarray] = None
    prec_idx: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    prec_grad: np.ndarray = field(default_factory=lambda: _EMPTY_F)

    @property
    def touched(self) -> np.ndarray:
        return np.unique(np.concatenate([self.mu_idx, self.c_rows]))

    def scaled(self, a: float) -> "StochasticEstimate":
        return StochasticEstimate(
            a * self.value, self.mu_idx, a * self.mu_grad, self.c_rows, self.c_cols, a * self.c_grad,
            None if self.hyper_grad is None else a * self.hyper_grad, self.prec_idx, a * self.prec_grad)

    def __add__(self, other: "StochasticEstimate") -> "StochasticEstimate":
        if self.hyper_grad is None:
            hg = other.hyper_grad
        elif other.hyper_grad is None:
            hg = self.hyper_grad
        else:
            hg = self.hyper_grad + other.hyper_grad
        return StochasticEstimate(
            self.value + other.value,
            np.concatenate([self.mu_idx, other.mu_idx]),
            np.concatenate([self.mu_grad, other.mu_grad]),
            np.concatenate([self.c_rows, other.c_rows]),
            np.concatenate([self.c_cols, other.c_cols]),
            np.concatenate([self.c_grad, other.c_grad]),
            hg,
            np.concatenate([self.prec_idx, other.prec_idx]),
            np.concatenate([self.prec_grad, other.prec_grad]))

    def grad_mu_dense(self, m) -> np.ndarray:
        return np.bincount(self.mu_idx, weights=self.mu_grad, minlength=m)

    def grad_c_dense(self, m) -> np.ndarray:
        G = np.zeros((m, m))
        np.add.at(G, (self.c_rows, self.c_cols), self.c_grad)
        return G

    def grad_prec_dense(self, m) -> np.ndarray:
        return np.bincount(self.prec_idx, weights=self.prec_grad, minlength=m)


class BatchFeatures:
    """``Phi[l, i]`` and ``Phi[l, j]`` for one batch, shared between estimators."""

    def __init__(self, expansion: BasisExpansion, X, batch: IndexBatch):
        # batches from sample_batch are in range by construction
        checked = batch.checked
        self._coupling = None
        self.fi = BlockFeatures(expansion, X, batch.l, batch.i, checked)
        if batch.enumerated:
            self.fj = self.fi
        else:
            self.fj = BlockFeatures(expansion, X, batch.l, batch.j, checked)

    def coupling(self, expansion: BasisExpansion, batch: IndexBatch) -> "PrecisionCoupling":
        if self._coupling is None:
            self._coupling = PrecisionCoupling(expansion, batch.i, batch.j)
        return self._coupling

    @property
    def phi_i(self):
        return self.fi.phi

    @property
    def phi_j(self):
        return self.fj.phi


class _HyperAccumulator:
    """Collects feature-contraction weights and direct hyperparameter derivatives."""

    def __init__(self, feats: BatchFeatures, d: int):
        self.feats = feats
        self.d = d
        self.w_i = None
        self.w_j = None
        self.direct = np.zeros(d + 3)

    def add_i(self, w):
        self.w_i = w if self.w_i is None else self.w_i + w

    def add_j(self, w):
        self.w_j = w if self.w_j is None else self.w_j + w

    def result(self) -> np.ndarray:
        out = self.direct.copy()
        if not self.feats.fi.differentiable:
            # only rff features carry analytic hyperparameter derivatives
            return out
        if self.w_i is not None:
            out[: self.d + 1] += self.feats.fi.contract(self.w_i)
        if self.w_j is not None:
            out[: self.d + 1] += self.feats.fj.contract(self.w_j)
        return out


# below this many draws, index matching uses dense equality masks
_SMALL = 64


class PrecisionCoupling:
    """Products with the sampled precision block ``S[j, i]``.

    Diagonal kinds never build the ``|j| x |i|`` block for large draws:
    matching indices are aggregated instead.
    """

    def __init__(self, expansion: BasisExpansion, i, j):
        self.diagonal = expansion.diagonal_precision
        self.dictionary = expansion.kind == DICTIONARY
        self.i, self.j = i, j
        self.aggregate = self.diagonal and max(len(i), len(j)) > _SMALL
        if self.aggregate:
            uniq, inv = np.unique(np.concatenate([i, j]), return_inverse=True)
            self.uniq = uniq
            self.inv_i = inv[: len(i)]
            self.inv_j = inv[len(i):]
            self.s_u = _precision_diag(expansion, uniq)
        elif self.diagonal:
            s_j = _precision_diag(expansion, j)
            self.block = (j[:, None] == i[None, :]) * s_j[:, None]
        else:
            self.block = prior_precision_block(expansion, j, i)

    def _agg(self, inv, v):
        if v.ndim == 1:
            return np.bincount(inv, weights=v, minlength=len(self.uniq))
        out = np.zeros((len(self.uniq),) + v.shape[1:])
        np.add.at(out, inv, v)
        return out

    def matvec(self, v_i):
        """``S[j, i] @ v_i``."""
        if not self.aggregate:
            return self.block @ v_i
        agg = self._agg(self.inv_i, v_i)
        s = self.s_u[self.inv_j]
        return (s if v_i.ndim == 1 else s[:, None]) * agg[self.inv_j]

    def rmatvec(self, v_j):
        """``S[j, i]^T @ v_j``."""
        if not self.aggregate:
            return self.block.T @ v_j
        agg = self._agg(self.inv_j, v_j)
        s = self.s_u[self.inv_i]
        return (s if v_j.ndim == 1 else s[:, None]) * agg[self.inv_i]

    def log_precision_grad(self, v_j, v_i, s_v_i=None):
        """Derivative of ``sum(v_j * (S[j, i] @ v_i))`` w.r.t. ``log s``, in coordinate form.

        ``s_v_i`` may pass a precomputed ``matvec(v_i)``.
        """
        if not self.dictionary:
            return _EMPTY_I, _EMPTY_F
        if not self.aggregate:
            # a matched pair contributes through the precision of its j index
            if s_v_i is None:
                s_v_i = self.matvec(v_i)
            prod = v_j * s_v_i
            if prod.ndim > 1:
                prod = prod.sum(axis=1)
            return self.j, prod
        prod = self._agg(self.inv_j, v_j) * self._agg(self.inv_i, v_i)
        if prod.ndim > 1:
            prod = prod.sum(axis=1)
        return self.uniq, self.s_u * prod


def _counts(idx, values):
    """Occurrences of each ``values`` entry in ``idx`` and a position holding it (if any)."""
    if len(idx) <= _SMALL and len(values) <= _SMALL:
        eq = values[:, None] == idx[None, :]
        return eq.sum(axis=1), eq.argmax(axis=1)
    order = np.argsort(idx, kind="stable")
    srt = idx[order]
    lo = np.searchsorted(srt, values, "left")
    hi = np.searchsorted(srt, values, "right")
    pos = order[np.minimum(lo, len(srt) - 1)]
    return hi - lo, pos


def _coords(idx, head, g):
    """Coordinate form of ``g ~ C[idx, head]`` restricted to free entries (all ``head < k``)."""
    a, b = np.nonzero(idx[:, None] >= head[None, :])
    return idx[a], head[b], g[a, b]


def _diag_hits(i, j, tail):
    """Diagonal-only columns hit by both ``i`` and ``j``: ``(rb, cnt_i * cnt_j, position in i)``."""
    if len(i) <= _SMALL and len(tail) <= _SMALL:
        eq_i = tail[:, None] == i[None, :]
        cc = eq_i.sum(axis=1) * (tail[:, None] == j[None, :]).sum(axis=1)
        hit = cc > 0
        return tail[hit], cc[hit].astype(np.float64), eq_i[hit].argmax(axis=1)
    cnt_i, pos_i = _counts(i, tail)
    cnt_j, _ = _counts(j, tail)
    hit = (cnt_i > 0) & (cnt_j > 0)
    return tail[hit], (cnt_i[hit] * cnt_j[hit]).astype(np.float64), pos_i[hit]


def _sizes(batch):
    return float(batch.n), float(batch.m), float(batch.m_tilde), float(batch.n_tilde)


def estimate_l_mu(batch: IndexBatch, expansion: BasisExpansion, X, y, sigma2, mu, *,
                  feats: Optional[BatchFeatures] = None, include_data=True, include_prior=True,
                  hyper_grads=False, grads=True) -> StochasticEstimate:
    """Unbiased estimate of the mean term ``l_mu`` of the Gaussian ELBO.

    With ``include_data=False`` only the prior term ``mu^T S mu`` is estimated;
    ``include_prior=False`` drops it instead.
    ``grads=False`` skips all gradient work and returns the value alone.
    """
    n, m, mt, nt = _sizes(batch)
    i, j = batch.i, batch.j
    mu = np.asarray(mu)
    mi, mj = mu[i], mu[j]
    beta = m * m / (mt * mt)

    if include_data and feats is None:
        feats = BatchFeatures(expansion, X, batch)
    if include_prior:
        cpl = feats.coupling(expansion, batch) if feats is not None else PrecisionCoupling(expansion, i, j)
        s_mi = cpl.matvec(mi)
        value = beta * float(mj @ s_mi)
    else:
        value = 0.0

    data = 0.0
    if include_data:
        A = 2.0 * n * m / (sigma2 * nt * mt)
        B = n * m * m / (sigma2 * nt * mt * mt)
        Pi, Pj = feats.phi_i, feats.phi_j
        yl = np.asarray(y)[batch.l]
        fi = Pi @ mi
        fj = Pj @ mj
        data = -A * float(yl @ fi) + B * float(fj @ fi)
        value += data
    if not grads:
        return StochasticEstimate(value)

    if include_prior:
        g_i = beta * cpl.rmatvec(mj)
        g_j = beta * s_mi
        p_idx, p_grad = cpl.log_precision_grad(mj, mi, s_mi)
        p_grad = beta * p_grad
    else:
        g_i, g_j = np.zeros(len(i)), np.zeros(len(j))
        p_idx, p_grad = _EMPTY_I, _EMPTY_F
    hyper = None
    if include_data:
        resid = B * fj - A * yl
        g_i = g_i + Pi.T @ resid
        g_j = g_j + B * (Pj.T @ fi)
        if hyper_grads:
            acc = _HyperAccumulator(feats, expansion.hyper.d)
            acc.direct[expansion.hyper.noise_slot()] = -data
            acc.add_i(np.outer(resid, mi))
            acc.add_j(np.outer(B * fi, mj))
            hyper = acc.result()
    elif hyper_grads:
        hyper = np.zeros(expansion.hyper.d + 3)

    return StochasticEstimate(value, np.concatenate([i, j]), np.concatenate([g_i, g_j]),
                              hyper_grad=hyper, prec_idx=p_idx, prec_grad=p_grad)


def estimate_l_sigma(batch: IndexBatch, expansion: BasisExpansion, X, sigma2, state: VariationalState, *,
                     feats: Optional[BatchFeatures] = None, include_data=True,
                     hyper_grads=False, grads=True) -> StochasticEstimate:
    """Unbiased estimate of the covariance term ``l_sigma`` for a chevron factor.

    Diagonal-only columns are handled through index counts: ``c[i, r]`` is
    nonzero only where ``i == r``, so their contribution reduces to
    ``c_rr^2 * #(i == r) * #(j == r) * (alpha |phi_r|^2 + beta s_rr)``.
    With ``include_data=False`` the data term is dropped, leaving
    ``tr(S Sigma) - log|Sigma|``.
    """
    n, m, mt, nt = _sizes(batch)
    i, j, r = batch.i, batch.j, batch.r
    k = state.k
    scale = m / mt
    beta = m * m / (mt * mt)
    alpha = n * m * m / (sigma2 * nt * mt * mt)

    log_c = state.log_diag[r]
    c_r = np.exp(log_c)
    if not c_r.min() > 0:
        raise InvalidState("sampled diagonal entries of C must be positive")
    value = -2.0 * scale * float(log_c.sum())
    rows, cols, g_list, p_idx, p_grad = [r], [r], [], [], []
    if grads:
        g_list.append(-2.0 * scale / c_r)

    if include_data and feats is None:
        feats = BatchFeatures(expansion, X, batch)
    acc = _HyperAccumulator(feats, expansion.hyper.d) if (grads and hyper_grads and include_data) else None
    noise_d = 0.0

    # diagonal-only columns
    tail = r[r >= k] if k else r
    if tail.size:
        rb, cc, pos = _diag_hits(i, j, tail)
        if rb.size:
            c2 = np.exp(2.0 * state.log_diag[rb])
            s_rr = _precision_diag(expansion, rb)
            K = beta * s_rr * cc
            if include_data:
                phi_cols = feats.phi_i[:, pos]
                data = alpha * cc * (phi_cols * phi_cols).sum(axis=0)
                K = K + data
                noise_d -= scale * float(c2 @ data)
                if acc is not None:
                    w = np.zeros_like(feats.phi_i)
                    np.add.at(w.T, pos, (scale * alpha * 2.0 * c2 * cc)[:, None] * phi_cols.T)
                    acc.add_i(w)
            value += scale * float(c2 @ K)
            if grads:
                rows.append(rb)
                cols.append(rb)
                g_list.append(scale * 2.0 * np.sqrt(c2) * K)
                if expansion.kind == DICTIONARY:
                    p_idx.append(rb)
                    p_grad.append(scale * beta * c2 * cc * s_rr)

    # dense columns
    head = r[r < k] if k else _EMPTY_I
    if head.size:
        ij = np.concatenate([i, j])
        Cij = state.head_columns(ij, head)
        Ci, Cj = Cij[: len(i)], Cij[len(i):]
        cpl = feats.coupling(expansion, batch) if feats is not None else PrecisionCoupling(expansion, i, j)
        SCi = cpl.matvec(Ci)
        value += scale * beta * float((Cj * SCi).sum())
        if include_data:
            Pi, Pj = feats.phi_i, feats.phi_j
            P = Pi @ Ci
            Q = Pj @ Cj
            data = scale * alpha * float((P * Q).sum())
            value += data
            noise_d -= data
        if grads:
            gCi = scale * beta * cpl.rmatvec(Cj)
            gCj = scale * beta * SCi
            pi_, pg_ = cpl.log_precision_grad(Cj, Ci, SCi)
            if pi_.size:
                p_idx.append(pi_)
                p_grad.append(scale * beta * pg_)
            if include_data:
                gCi = gCi + scale * alpha * (Pi.T @ Q)
                gCj = gCj + scale * alpha * (Pj.T @ P)
                if acc is not None:
                    acc.add_i(scale * alpha * (Q @ Ci.T))
                    acc.add_j(scale * alpha * (P @ Cj.T))
            rr, cc_, gg = _coords(ij, head, np.concatenate([gCi, gCj]))
            rows.append(rr)
            cols.append(cc_)
            g_list.append(gg)

    if not grads:
        return StochasticEstimate(value)
    hyper = None
    if hyper_grads:
        if acc is not None:
            acc.direct[expansion.hyper.noise_slot()] = noise_d
            hyper = acc.result()
        else:
            hyper = np.zeros(expansion.hyper.d + 3)

    return StochasticEstimate(
        value, c_rows=np.concatenate(rows), c_cols=np.concatenate(cols), c_grad=np.concatenate(g_list),
        hyper_grad=hyper,
        prec_idx=np.concatenate(p_idx) if p_idx else _EMPTY_I,
        prec_grad=np.concatenate(p_grad) if p_grad else _EMPTY_F)


def estimate_l_const(batch: IndexBatch, expansion: BasisExpansion, y, sigma2, *,
                     include_data=True, include_prior=True, hyper_grads=False,
                     grads=True) -> StochasticEstimate:
    """Unbiased estimate of ``l_const``.

    The prior part ``-log|S| - m`` needs a diagonal ``S``; ``include_prior=False``
    drops it (allowed for any kind) and ``include_data=False`` drops the rest.
    """
    n, m, mt, nt = _sizes(batch)
    value = 0.0
    if include_prior:
        if not expansion.diagonal_precision:
            raise UnsupportedOperation("the log-determinant estimator needs a diagonal S")
        if expansion.kind == DICTIONARY:
            log_s = float(expansion.log_precisions[batch.i].sum())
        else:
            log_s = float(np.log(_precision_diag(expansion, batch.i)).sum())
        value = -(m / mt) * log_s - m
    yy = 0.0
    if include_data:
        yl = np.asarray(y)[batch.l]
        yy = n * float(yl @ yl) / (sigma2 * nt)
        value += n * (_LOG_2PI + np.log(sigma2)) + yy
    if not grads:
        return StochasticEstimate(value)
    hyper = None
    if hyper_grads:
        hyper = np.zeros(expansion.hyper.d + 3)
        if include_data:
            hyper[expansion.hyper.noise_slot()] = n - yy
    p_idx, p_grad = _EMPTY_I, _EMPTY_F
    if include_prior and expansion.kind == DICTIONARY:
        p_idx = batch.i
        p_grad = np.full(len(batch.i), -(m / mt))
    return StochasticEstimate(value, hyper_grad=hyper, prec_idx=p_idx, prec_grad=p_grad)


def estimate_elbo_lower_bound(batch: IndexBatch, expansion: BasisExpansion, X, site: SiteProjection,
                              state: VariationalState, quad_points=101, *,
                              feats: Optional[BatchFeatures] = None,
                              hyper_grads=False) -> StochasticEstimate:
    """Stochastic lower bound on the expected log likelihood for log-concave sites.

    The inner argument uses one shared ``(i, j, r)`` draw for all rows and
    quadrature nodes.  ``quad_points=0`` uses the batch's single ``z``
    sample instead of Gauss-Hermite nodes.
    """
    n, m, mt, nt = _sizes(batch)
    i, j, r, l = batch.i, batch.j, batch.r, batch.l
    k = state.k
    if quad_points > 0:
        nodes, weights = gauss_hermite(quad_points)
    else:
        if batch.z is None:
            raise ValueError("z-sampling mode needs a batch drawn with need_z=True")
        nodes, weights = np.array([batch.z]), np.array([1.0])
    if feats is None:
        feats = BatchFeatures(expansion, X, batch)
    Pi, Pj = feats.phi_i, feats.phi_j
    mi = np.asarray(state.mu)[i]
    lin = m / mt
    cube = (m / mt) ** 3

    mean = lin * (Pi @ mi)
    v = np.zeros(len(l))

    tail = r[r >= k]
    diag_terms = None
    if tail.size:
        rb, cc, pos = _diag_hits(i, j, tail)
        if rb.size:
            c = state.diag(rb)
            phi_cols = Pi[:, pos]
            v += (phi_cols * phi_cols) @ (c * c * cc)
            diag_terms = (rb, cc, c, pos, phi_cols)

    head = r[r < k]
    dense_terms = None
    if head.size:
        Ci = state.head_columns(i, head)
        Cj = state.head_columns(j, head)
        P = Pi @ Ci
        Q = Pj @ Cj
        v += np.sum(P * Q, axis=1)
        dense_terms = (Ci, Cj, P, Q)

    u = mean[:, None] + cube * v[:, None] * nodes[None, :]
    ratio = n / nt
    value = ratio * float(np.sum(site.log_g(u, rows=l) @ weights))
    D = site.dlog_g(u, rows=l)
    k_mu = ratio * lin * (D @ weights)
    k_v = ratio * cube * (D @ (weights * nodes))

    mu_idx = i
    mu_grad = Pi.T @ k_mu
    rows, cols, grads = [], [], []
    if diag_terms is not None:
        rb, cc, c, pos, phi_cols = diag_terms
        rows.append(rb)
        cols.append(rb)
        grads.append(2.0 * c * cc * (k_v @ (phi_cols * phi_cols)))
    if dense_terms is not None:
        Ci, Cj, P, Q = dense_terms
        gCi = Pi.T @ (k_v[:, None] * Q)
        gCj = Pj.T @ (k_v[:, None] * P)
        rr, cc_, gg = _coords(np.concatenate([i, j]), head, np.concatenate([gCi, gCj]))
        rows.append(rr)
        cols.append(cc_)
        grads.append(gg)

    hyper = None
    if hyper_grads:
        hp = expansion.hyper
        direct = np.zeros(hp.d + 3)
        if site.likelihood in (GAUSSIAN, LAPLACE):
            slot = hp.noise_slot() if site.likelihood == GAUSSIAN else hp.laplace_slot()
            direct[slot] = ratio * float(np.sum(site.dlog_g_dlogscale(u, rows=l) @ weights))
        if expansion.kind == "rff_se_ard":
            acc = _HyperAccumulator(feats, hp.d)
            acc.direct = direct
            w_i = np.outer(k_mu, mi)
            if dense_terms is not None:
                Ci, Cj, P, Q = dense_terms
                w_i = w_i + k_v[:, None] * (Q @ Ci.T)
                acc.add_j(k_v[:, None] * (P @ Cj.T))
            if diag_terms is not None:
                rb, cc, c, pos, phi_cols = diag_terms
                w = np.zeros_like(Pi)
                np.add.at(w.T, pos, (2.0 * c * c * cc)[:, None] * (phi_cols * k_v[:, None]).T)
                w_i = w_i + w
            acc.add_i(w_i)
            hyper = acc.result()
        else:
            hyper = direct

    return StochasticEstimate(
        value, mu_idx, mu_grad,
        np.concatenate(rows) if rows else _EMPTY_I,
        np.concatenate(cols) if cols else _EMPTY_I,
        np.concatenate(grads) if grads else _EMPTY_F,
        hyper_grad=hyper)


def estimate_hyper_grads(batch: IndexBatch, expansion: BasisExpansion, X, y, sigma2, state: VariationalState,
                         *, feats: Optional[BatchFeatures] = None) -> np.ndarray:
    """Unbiased gradient of the stochastic Gaussian ELBO w.r.t. the log hyperparameters."""
    if expansion.kind != "rff_se_ard":
        raise UnsupportedOperation("hyperparameter gradients need the rff_se_ard expansion")
    if feats is None:
        feats = BatchFeatures(expansion, X, batch)
    g = estimate_l_mu(batch, expansion, X, y, sigma2, state.mu, feats=feats, hyper_grads=True).hyper_grad
    g = g + estimate_l_sigma(batch, expansion, X, sigma2, state, feats=feats, hyper_grads=True).hyper_grad
    g = g + estimate_l_const(batch, expansion, y, sigma2, hyper_grads=True).hyper_grad
    return -0.5 * g
