"""Stochastic training of the variational state.

One step draws an :class:`~qsgp.estimators.IndexBatch`, evaluates the
stochastic objective ``L = -2 * ELBO`` and its sparse gradients, and then
applies

* sparse AdaGrad to the touched entries of ``mu``, ``log diag(C)`` and the
  dense chevron columns,
* Adam to the log hyperparameters once the freeze period is over,
* lazy sparse Adam to the RVM log precisions when present.

Only touched coordinates are read or written, so a step costs the same for
any ``n`` and ``m`` given the mini-batch sizes.
"""
from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from . import _rng
from .chevron import VariationalState
from .control_variates import (
    LinearControlVariate,
    NystromControlVariate,
    cv_l_mu_correction,
    cv_l_sigma_correction,
    cv_linear_correction,
    cv_nystrom_correction,
    init_control_variate,
    precompute_phi_t_y,
    support_rows,
)
from .errors import NumericError, UnsupportedOperation
from .estimators import (
    BatchFeatures,
    StochasticEstimate,
    estimate_elbo_lower_bound,
    estimate_l_const,
    estimate_l_mu,
    estimate_l_sigma,
    sample_batch,
)
from .features import (
    DICTIONARY,
    INDUCING,
    RFF,
    BasisExpansion,
    Hyperparameters,
    feature_block,
    prior_precision_block,
    prior_precision_diag,
)
from .sites import GAUSSIAN, LAPLACE, LIKELIHOODS, SiteProjection

METRIC_COLUMNS = ("iteration", "elbo_estimate", "l_mu_est", "l_sigma_est", "l_const_est",
                  "lr_v", "lr_h", "step_wall_ms", "rejected")

_INIT_ROWS_STREAM = 0x1417
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    """Training settings; ``hyper_freeze=None`` means ``iterations // 10``."""

    m_tilde: int = 10000
    n_tilde: int = 500
    n_bar: int = 500
    chevron_k: int = 10
    iterations: int = 1000
    lr_variational: float = 0.1
    lr_hyper: float = 1e-5
    decay_factor: float = 100.0
    hyper_freeze: Optional[int] = None
    likelihood: str = GAUSSIAN
    quad_points: int = 101
    seed: int = 0
    full_batch: bool = False
    log_every: int = 100
    diag_refresh: int = 0
    init_rows: int = 1000
    learn_hyper: bool = True
    lr_precision: float = 0.05
    # multiplier on lr_variational for the dense off-diagonal entries of C
    lr_chevron_scale: float = 1.0
    prune_threshold: float = 1e4
    adagrad_eps: float = 1e-8
    linear_cv: bool = False
    nystrom_rank: int = 0
    # gaussian likelihoods: hold diagonal-only columns at their closed-form optimum instead of AdaGrad
    exact_tail: bool = True

    def __post_init__(self):
        for name in ("m_tilde", "n_tilde", "log_every", "init_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_bar", "chevron_k", "iterations", "diag_refresh", "quad_points", "nystrom_rank"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.hyper_freeze is None:
            self.hyper_freeze = self.iterations // 10
        if not 0 <= self.hyper_freeze <= max(self.iterations, 0) and self.iterations > 0:
            raise ValueError("hyper_freeze must lie in [0, iterations]")
        if self.decay_factor < 1.0:
            raise ValueError("decay_factor must be at least 1")
        if self.lr_variational <= 0 or min(self.lr_hyper, self.lr_precision, self.lr_chevron_scale) < 0:
            raise ValueError("learning rates must be positive")
        if self.prune_threshold <= 0:
            raise ValueError("prune_threshold must be positive")

    def decay(self, t: int) -> float:
        """Multiplier at 1-based iteration ``t``: falls geometrically to ``1/decay_factor`` at ``t = T + 1``."""
        return float(self.decay_factor ** (-(t - 1) / max(self.iterations, 1)))


@dataclass
class TrainData:
    X: Optional[np.ndarray]
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X is not None:
            self.X = np.asarray(self.X, dtype=np.float64)
            if self.X.ndim == 1:
                self.X = self.X[:, None]
            if len(self.X) != len(self.y):
                raise ValueError("X and y have different numbers of rows")
        if len(self.y) == 0:
            raise ValueError("dataset is empty")

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass
class RvmState:
    """Per-basis log precisions; ``log_s`` is shared with the dictionary expansion."""

    log_s: np.ndarray
    prune_threshold: float = 1e4
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    steps: np.ndarray = None
    # phi_r^T phi_r per basis; set for gaussian likelihoods so the tail diagonal can follow s
    col_sq: Optional[np.ndarray] = None

    def __post_init__(self):
        m = len(self.log_s)
        if self.adam_m is None:
            self.adam_m = np.zeros(m)
            self.adam_v = np.zeros(m)
            self.steps = np.zeros(m, dtype=np.int64)

    @property
    def precisions(self) -> np.ndarray:
        return np.exp(self.log_s)


@dataclass
class TrainingState:
    """Everything mutated by :func:`sgd_step`."""

    expansion: BasisExpansion
    state: VariationalState
    config: TrainConfig
    cv: object = None
    nystrom: object = None
    linear: object = None
    rvm: Optional[RvmState] = None
    acc_mu: np.ndarray = None
    acc_diag: np.ndarray = None
    acc_lower: np.ndarray = None
    scale_mu: np.ndarray = None
    scale_diag: np.ndarray = None
    scale_lower: np.ndarray = None
    hyper_m: np.ndarray = None
    hyper_v: np.ndarray = None
    hyper_steps: int = 0
    prior_const: float = 0.0
    # phi_r^T phi_r per basis when diagonal-only columns follow their closed form
    col_sq: Optional[np.ndarray] = None
    iteration: int = 0
    rejected: int = 0

    def __post_init__(self):
        m, k = self.state.m, self.state.k
        if self.acc_mu is None:
            self.acc_mu = np.zeros(m)
            self.acc_diag = np.zeros(m)
            self.acc_lower = np.zeros((m, k))
            self.scale_mu = np.ones(m)
            self.scale_diag = np.ones(m)
            self.scale_lower = np.ones((m, k))
        if self.hyper_m is None:
            p = self.expansion.hyper.d + 3
            self.hyper_m = np.zeros(p)
            self.hyper_v = np.zeros(p)

    @property
    def hyper(self) -> Hyperparameters:
        return self.expansion.hyper


# -- initialization ------------------------------------------------------

def closed_form_crr(phi_sq_norm, sigma2, s_rr):
    """Optimal diagonal entry ``sqrt(sigma2 / (phi_r^T phi_r + sigma2 s_rr))`` of a diagonal-only column."""
    phi_sq_norm = np.asarray(phi_sq_norm, dtype=np.float64)
    s_rr = np.asarray(s_rr, dtype=np.float64)
    if np.any(phi_sq_norm < 0) or not sigma2 > 0:
        raise ValueError("need phi_r^T phi_r >= 0 and sigma2 > 0")
    denom = phi_sq_norm + sigma2 * s_rr
    if np.any(denom <= 0):
        raise ValueError("the column objective has no minimizer for s_rr <= 0 with zero features")
    out = np.sqrt(sigma2 / denom)
    return float(out) if out.ndim == 0 else out


def column_sq_norms(expansion: BasisExpansion, X, n, rows_budget, seed=0, chunk=4096) -> np.ndarray:
    """``phi_r^T phi_r`` for every column, from at most ``rows_budget`` rows scaled by ``n / rows``."""
    if rows_budget >= n:
        rows = np.arange(n)
    else:
        u = _rng.uniform(_rng.key(seed, _INIT_ROWS_STREAM), np.arange(n, dtype=np.uint64))
        rows = np.sort(np.argsort(u, kind="stable")[:rows_budget])
    out = np.empty(expansion.m)
    for lo in range(0, expansion.m, chunk):
        cols = np.arange(lo, min(lo + chunk, expansion.m))
        P = feature_block(expansion, X, rows, cols)
        out[cols] = np.einsum("ab,ab->b", P, P)
    return out * (n / len(rows))


def init_state(expansion: BasisExpansion, data: TrainData, config: TrainConfig, sq=None) -> VariationalState:
    """``mu = 0``, zero off-diagonals, diagonal from the closed-form per-column optimum.

    ``sq`` may supply precomputed column norms ``phi_r^T phi_r``.
    """
    m = expansion.m
    k = min(config.chevron_k, m)
    if m == 0:
        return VariationalState(np.zeros(0), np.zeros(0), np.zeros((0, 0)))
    if sq is None:
        sq = column_sq_norms(expansion, data.X, data.n, config.init_rows, config.seed)
    s = prior_precision_diag(expansion, np.arange(m))
    c = closed_form_crr(sq, expansion.hyper.noise_variance, s)
    return VariationalState(np.zeros(m), np.log(c), np.zeros((m, k)))


def _prior_const(expansion: BasisExpansion, limit=10000) -> float:
    """``-log|S| - m`` for a dense ``S`` (NaN above ``limit`` basis functions)."""
    m = expansion.m
    if m > limit:
        return float("nan")
    S = prior_precision_block(expansion, np.arange(m), np.arange(m))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError("prior precision is not positive definite") from exc
    return float(-2.0 * np.sum(np.log(np.diag(L))) - m)


def init_training(data: TrainData, expansion: BasisExpansion, config: TrainConfig,
                  state: Optional[VariationalState] = None, rvm: bool = False) -> TrainingState:
    if expansion.needs_inputs and data.X is None:
        raise ValueError("this expansion needs input features")
    if expansion.kind == RFF and data.X is not None and data.X.shape[1] != expansion.hyper.d:
        raise ValueError("input dimension does not match the hyperparameters")
    sq = None
    if config.likelihood == GAUSSIAN and expansion.m and (config.exact_tail or rvm):
        sq = column_sq_norms(expansion, data.X, data.n, config.init_rows, config.seed)
    if state is None:
        state = init_state(expansion, data, config, sq)
    rvm_state = None
    if rvm:
        if expansion.kind != DICTIONARY:
            raise UnsupportedOperation("RVM training needs an explicit_dictionary expansion")
        log_s = np.array(expansion.log_precisions, dtype=np.float64)
        expansion = dataclasses.replace(expansion, log_precisions=log_s)
        rvm_state = RvmState(log_s, config.prune_threshold, col_sq=sq)
    ts = TrainingState(expansion, state, config, rvm=rvm_state, col_sq=sq)
    if not expansion.diagonal_precision:
        ts.prior_const = _prior_const(expansion)
    if config.likelihood == GAUSSIAN and expansion.m:
        ts.cv = init_control_variate(state, expansion, data.X, data.n, config.n_bar, config.seed)
        if config.linear_cv:
            ts.linear = LinearControlVariate(precompute_phi_t_y(expansion, data.X, data.y), state.mu)
    if config.nystrom_rank and expansion.m:
        if expansion.kind != INDUCING:
            raise UnsupportedOperation("the Nystrom correction needs an inducing_point expansion")
        rows = support_rows(config.seed + 1, expansion.m, min(config.nystrom_rank, expansion.m))
        ts.nystrom = NystromControlVariate(expansion.inducing_inputs[rows], expansion, state.k).recompute(state)
    return ts


# -- one step ------------------------------------------------------------

def _aggregate(idx, g):
    """Sum ``g`` over repeated ``idx``; returns unique indices and summed values."""
    if idx.size == 0:
        return idx, g
    uniq, inv = np.unique(idx, return_inverse=True)
    return uniq, np.bincount(inv, weights=g, minlength=len(uniq))


def _hyper_mask(expansion: BasisExpansion, likelihood: str) -> np.ndarray:
    hp = expansion.hyper
    mask = np.zeros(hp.d + 3, dtype=bool)
    if expansion.kind == RFF:
        mask[: hp.d + 1] = True
    if likelihood == GAUSSIAN:
        mask[hp.noise_slot()] = True
    elif likelihood == LAPLACE:
        mask[hp.laplace_slot()] = True
    return mask


def _objective(ts: TrainingState, data: TrainData, batch, feats, hyper_on: bool):
    """Stochastic ``L = -2 ELBO`` with gradients, plus the three reported parts."""
    ex, st, cfg = ts.expansion, ts.state, ts.config
    sigma2 = ex.hyper.noise_variance
    diag = ex.diagonal_precision
    if cfg.likelihood == GAUSSIAN:
        e_mu = estimate_l_mu(batch, ex, data.X, data.y, sigma2, st.mu, feats=feats, hyper_grads=hyper_on)
        e_sig = estimate_l_sigma(batch, ex, data.X, sigma2, st, feats=feats, hyper_grads=hyper_on)
        e_const = estimate_l_const(batch, ex, data.y, sigma2, include_prior=diag, hyper_grads=hyper_on)
        if ts.cv is not None:
            for corr, into_mu in ((cv_l_mu_correction(batch, ts.cv, st, sigma2), True),
                                  (cv_l_sigma_correction(batch, ts.cv, st, sigma2), False)):
                if hyper_on:
                    # corrections scale as 1 / sigma2
                    corr.hyper_grad = np.zeros(ex.hyper.d + 3)
                    corr.hyper_grad[ex.hyper.noise_slot()] = -corr.value
                if into_mu:
                    e_mu = e_mu + corr
                else:
                    e_sig = e_sig + corr
        if ts.linear is not None:
            corr = cv_linear_correction(batch, ts.linear, sigma2, st.mu)
            if hyper_on:
                corr.hyper_grad = np.zeros(ex.hyper.d + 3)
                corr.hyper_grad[ex.hyper.noise_slot()] = -corr.value
            e_mu = e_mu + corr
        data_part = None
    else:
        scale = ex.hyper.laplace_scale if cfg.likelihood == LAPLACE else 1.0
        site = SiteProjection(cfg.likelihood, data.y, scale)
        data_part = estimate_elbo_lower_bound(batch, ex, data.X, site, st, cfg.quad_points, feats=feats,
                                              hyper_grads=hyper_on)
        e_mu = estimate_l_mu(batch, ex, data.X, data.y, sigma2, st.mu, feats=feats, include_data=False,
                             hyper_grads=hyper_on)
        e_sig = estimate_l_sigma(batch, ex, data.X, sigma2, st, feats=feats, include_data=False,
                                 hyper_grads=hyper_on)
        e_const = (estimate_l_const(batch, ex, data.y, sigma2, include_data=False, hyper_grads=hyper_on)
                   if diag else StochasticEstimate(0.0, hyper_grad=np.zeros(ex.hyper.d + 3) if hyper_on else None))
    if ts.nystrom is not None:
        e_mu = e_mu + cv_nystrom_correction(batch, ts.nystrom, st)
        if batch.r.size:
            cols = [int(r) for r in batch.r if r < ts.nystrom.k]
            if cols:
                e_sig = e_sig + ts.nystrom.correction(batch, st, 1.0, cols)

    total = e_mu + e_sig + e_const
    if data_part is not None:
        total = data_part.scaled(-2.0) + total
    const_value = e_const.value + (0.0 if diag else ts.prior_const)
    if data_part is None:
        elbo = -0.5 * (e_mu.value + e_sig.value + const_value)
    else:
        elbo = data_part.value - 0.5 * (e_mu.value + e_sig.value + const_value)
    return total, elbo, e_mu.value, e_sig.value, const_value


def _adagrad(param, acc, scale, idx, g, lr, eps):
    acc[idx] += g * g
    param[idx] -= lr * scale[idx] * g / (np.sqrt(acc[idx]) + eps)


def sgd_step(ts: TrainingState, data: TrainData, t: Optional[int] = None) -> dict:
    """One stochastic step at 1-based iteration ``t`` (default: the next one); returns a metrics row."""
    start = time.perf_counter()
    cfg, st = ts.config, ts.state
    if t is None:
        t = ts.iteration + 1
    ex = ts.expansion
    n, m = data.n, ex.m
    mt, nt = (m, n) if cfg.full_batch else (min(cfg.m_tilde, m), min(cfg.n_tilde, n))
    hyper_on = cfg.learn_hyper and cfg.lr_hyper > 0 and t > cfg.hyper_freeze
    need_z = cfg.likelihood != GAUSSIAN and cfg.quad_points == 0
    batch = sample_batch((cfg.seed, t), n, m, mt, nt, need_z=need_z, enumerate_all=cfg.full_batch)
    feats = BatchFeatures(ex, data.X, batch)
    total, elbo, l_mu, l_sig, l_const = _objective(ts, data, batch, feats, hyper_on)

    lr_v = cfg.lr_variational * cfg.decay(t)
    lr_h = cfg.lr_hyper * cfg.decay(t) if hyper_on else 0.0
    k = st.k

    mu_u, g_mu = _aggregate(total.mu_idx, total.mu_grad)
    rows, cols, gc = total.c_rows, total.c_cols, total.c_grad
    on_diag = rows == cols
    d_rows = rows[on_diag]
    d_u, g_d = _aggregate(d_rows, gc[on_diag] * np.exp(st.log_diag[d_rows]))
    o_u, g_o = _aggregate(rows[~on_diag] * k + cols[~on_diag], gc[~on_diag])
    if ts.rvm is not None:
        p_u = np.unique(np.concatenate([batch.i, batch.j]))
        g_p = _precision_grad(st, ts.rvm, p_u)
    else:
        p_u, g_p = total.prec_idx[:0], total.prec_grad[:0]
    g_h = None
    if hyper_on:
        g_h = np.where(_hyper_mask(ex, cfg.likelihood), -0.5 * total.hyper_grad, 0.0)

    parts = (g_mu, g_d, g_o, g_p) + ((g_h,) if g_h is not None else ())
    finite = np.isfinite(total.value) and all(np.all(np.isfinite(p)) for p in parts)
    if not finite:
        _reject(ts, mu_u, g_mu, d_u, g_d, o_u, g_o)
        row = _row(t, elbo, l_mu, l_sig, l_const, lr_v, lr_h, start, rejected=1)
        ts.iteration = t
        return row

    eps = cfg.adagrad_eps
    track = ts.cv is not None or ts.nystrom is not None
    if track:
        old_mu = st.mu[mu_u].copy()
        c_touch = np.unique(np.concatenate([o_u // max(k, 1), d_u[d_u < k]])) if k else mu_u[:0]
        old_cols = st.head_columns(c_touch, np.arange(k)) if k else None
    if ts.linear is not None:
        old_lin = st.mu[mu_u].copy()

    exact_tail = ts.col_sq is not None and cfg.exact_tail
    if exact_tail:
        head = d_u < k
        tail = d_u[~head]
        d_u, g_d = d_u[head], g_d[head]
    _adagrad(st.mu, ts.acc_mu, ts.scale_mu, mu_u, g_mu, lr_v, eps)
    _adagrad(st.log_diag, ts.acc_diag, ts.scale_diag, d_u, g_d, lr_v, eps)
    if o_u.size:
        _adagrad(st.lower.reshape(-1), ts.acc_lower.reshape(-1), ts.scale_lower.reshape(-1), o_u, g_o,
                 lr_v * cfg.lr_chevron_scale, eps)
    st.version += 1

    for run in (ts.cv, ts.nystrom):
        if run is None:
            continue
        run.update(mu_u, old_mu, st.mu[mu_u])
        if k and c_touch.size:
            run.update(c_touch, old_cols, st.head_columns(c_touch, np.arange(k)))
        run.version = st.version
    if ts.linear is not None:
        ts.linear.update(mu_u, old_lin, st.mu[mu_u])

    if ts.rvm is not None and p_u.size and cfg.lr_precision > 0:
        _lazy_adam(ts.rvm, p_u, g_p, cfg.lr_precision * cfg.decay(t))
        if ts.col_sq is not None:
            # the optimum of a diagonal-only column moves with its precision
            moved = p_u[p_u >= k]
            tail = np.union1d(tail, moved) if exact_tail else moved
            exact_tail = True
    if exact_tail and tail.size:
        st.log_diag[tail] = np.log(closed_form_crr(ts.col_sq[tail], ex.hyper.noise_variance,
                                                   prior_precision_diag(ex, tail)))
    if g_h is not None:
        _hyper_adam(ts, g_h, lr_h)

    if cfg.diag_refresh and t % cfg.diag_refresh == 0:
        refresh_diagonal(ts, data)
    ts.iteration = t
    return _row(t, elbo, l_mu, l_sig, l_const, lr_v, lr_h, start, rejected=0)


def _precision_grad(st: VariationalState, rvm: RvmState, idx) -> np.ndarray:
    """Exact ``d(-2 ELBO)/d log s_i = s_i (mu_i^2 + Sigma_ii) - 1`` for the coordinates ``idx``.

    With diagonal ``S`` only the prior terms depend on ``s_i``, and each is
    available in O(k) from the state, so no sampling noise enters here.
    """
    var = np.exp(2.0 * st.log_diag[idx])
    if st.k:
        head = st.head_columns(idx, np.arange(st.k))
        var = var + np.einsum("ab,ab->a", head, head) - np.where(idx < st.k, var, 0.0)
    return np.exp(rvm.log_s[idx]) * (st.mu[idx] ** 2 + var) - 1.0


def _row(t, elbo, l_mu, l_sig, l_const, lr_v, lr_h, start, rejected):
    return {"iteration": t, "elbo_estimate": elbo, "l_mu_est": l_mu, "l_sigma_est": l_sig,
            "l_const_est": l_const, "lr_v": lr_v, "lr_h": lr_h,
            "step_wall_ms": 1e3 * (time.perf_counter() - start), "rejected": rejected}


def _reject(ts, mu_u, g_mu, d_u, g_d, o_u, g_o):
    """Halve the step scale of coordinates with non-finite gradients (all touched if none are)."""
    ts.rejected += 1
    groups = ((ts.scale_mu, mu_u, g_mu), (ts.scale_diag, d_u, g_d), (ts.scale_lower.reshape(-1), o_u, g_o))
    bad = [(s, u[~np.isfinite(g)]) for s, u, g in groups]
    if not any(b.size for _, b in bad):
        bad = [(s, u) for s, u, _ in groups]
    for s, idx in bad:
        s[idx] *= 0.5


def _lazy_adam(rvm: RvmState, idx, g, lr):
    # descent on L; moments and step counts advance only where touched
    rvm.steps[idx] += 1
    rvm.adam_m[idx] = _ADAM_B1 * rvm.adam_m[idx] + (1 - _ADAM_B1) * g
    rvm.adam_v[idx] = _ADAM_B2 * rvm.adam_v[idx] + (1 - _ADAM_B2) * g * g
    c = rvm.steps[idx]
    mhat = rvm.adam_m[idx] / (1 - _ADAM_B1 ** c)
    vhat = rvm.adam_v[idx] / (1 - _ADAM_B2 ** c)
    rvm.log_s[idx] -= lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)


def _hyper_adam(ts: TrainingState, g_elbo, lr):
    ts.hyper_steps += 1
    ts.hyper_m = _ADAM_B1 * ts.hyper_m + (1 - _ADAM_B1) * g_elbo
    ts.hyper_v = _ADAM_B2 * ts.hyper_v + (1 - _ADAM_B2) * g_elbo * g_elbo
    mhat = ts.hyper_m / (1 - _ADAM_B1 ** ts.hyper_steps)
    vhat = ts.hyper_v / (1 - _ADAM_B2 ** ts.hyper_steps)
    theta = ts.hyper.to_vector() + lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)
    ts.expansion = ts.expansion.with_hyper(Hyperparameters.from_vector(theta))


def refresh_diagonal(ts: TrainingState, data: TrainData):
    """Reset diagonal-only columns to their closed-form optimum (``O(init_rows * m)``)."""
    st, ex, cfg = ts.state, ts.expansion, ts.config
    k = st.k
    if k >= st.m:
        return
    sq = column_sq_norms(ex, data.X, data.n, cfg.init_rows, cfg.seed)
    if ts.col_sq is not None:
        ts.col_sq = sq
    s = prior_precision_diag(ex, np.arange(st.m))
    st.log_diag[k:] = np.log(closed_form_crr(sq[k:], ex.hyper.noise_variance, s[k:]))
    st.version += 1
    for run in (ts.cv, ts.nystrom):
        if run is not None:
            run.version = st.version


def train(data: TrainData, expansion: BasisExpansion, config: TrainConfig, *, rvm: bool = False,
          state: Optional[VariationalState] = None,
          on_row: Optional[Callable[[dict], None]] = None, ts: Optional[TrainingState] = None):
    """Run ``config.iterations`` steps; returns ``(TrainingState, metrics rows)``.

    A row is kept every ``log_every`` iterations and at the last one.
    """
    if ts is None:
        ts = init_training(data, expansion, config, state=state, rvm=rvm)
    rows: List[dict] = []
    T = config.iterations
    for t in range(ts.iteration + 1, T + 1):
        row = sgd_step(ts, data, t)
        if t % config.log_every == 0 or t == T:
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return ts, rows


def rvm_step(ts: TrainingState, data: TrainData, t: Optional[int] = None) -> dict:
    """One step that also moves the log precisions of a dictionary expansion."""
    if ts.rvm is None or ts.expansion.kind != DICTIONARY:
        raise UnsupportedOperation("rvm_step needs a training state built with rvm=True")
    return sgd_step(ts, data, t)


class PrunedModel(NamedTuple):
    keep: np.ndarray
    state: VariationalState
    expansion: BasisExpansion
    rvm: RvmState


def rvm_prune(rvm: RvmState, state: VariationalState, expansion: BasisExpansion) -> PrunedModel:
    """Keep basis functions with ``s_i < prune_threshold`` and compact ``mu``, ``C`` and the dictionary."""
    keep = np.flatnonzero(np.exp(rvm.log_s) < rvm.prune_threshold)
    if keep.size == 0:
        warnings.warn("every basis function was pruned; the model is empty", RuntimeWarning, stacklevel=2)
    k = state.k
    dense_keep = keep[keep < k]
    lower = state.lower[keep][:, dense_keep] if keep.size else np.zeros((0, 0))
    new_state = VariationalState(state.mu[keep].copy(), state.log_diag[keep].copy(), lower, state.version + 1)
    log_s = rvm.log_s[keep].copy()
    ex = dataclasses.replace(
        expansion, m=int(keep.size), log_precisions=log_s,
        phi=None if expansion.phi is None else expansion.phi[:, keep],
        inducing_inputs=None if expansion.inducing_inputs is None else expansion.inducing_inputs[keep])
    col_sq = None if rvm.col_sq is None else rvm.col_sq[keep].copy()
    return PrunedModel(keep, new_state, ex, RvmState(log_s, rvm.prune_threshold, col_sq=col_sq))
