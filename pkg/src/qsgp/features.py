"""Kernels and basis-function expansions.

A :class:`BasisExpansion` never stores the full ``n x m`` feature matrix.
Blocks ``Phi[rows, cols]`` and ``S[rows, cols]`` are produced on demand;
random Fourier frequencies are regenerated from the seed each time.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng
from .errors import UnsupportedOperation

RFF = "rff_se_ard"
INDUCING = "inducing_point"
DICTIONARY = "explicit_dictionary"
KINDS = (RFF, INDUCING, DICTIONARY)

GRAM_JITTER = 1e-8

_OMEGA_STREAM = 0x0FEA7


@dataclass(frozen=True)
class Hyperparameters:
    """Log-parameterized kernel and likelihood hyperparameters.

    The flat vector layout used by gradient code is
    ``[log_lengthscales..., log_signal_variance, log_noise_variance,
    log_laplace_scale]``.
    """

    log_lengthscales: np.ndarray
    log_signal_variance: float = 0.0
    log_noise_variance: float = float(np.log(0.1))
    log_laplace_scale: float = 0.0

    def __post_init__(self):
        ll = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=np.float64)).copy()
        ll.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ll)
        for name in ("log_signal_variance", "log_noise_variance", "log_laplace_scale"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)) or np.any(vec > 700.0):
            raise ValueError("hyperparameters must exponentiate to finite positive values")

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())

    def __hash__(self):
        return hash(self.to_vector().tobytes())

    @classmethod
    def create(cls, d, lengthscale=1.0, signal_variance=1.0, noise_variance=0.1, laplace_scale=1.0):
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=np.float64), (d,))
        return cls(np.log(ls), np.log(signal_variance), np.log(noise_variance), np.log(laplace_scale))

    @property
    def d(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    @property
    def laplace_scale(self) -> float:
        return float(np.exp(self.log_laplace_scale))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.log_lengthscales,
             [self.log_signal_variance, self.log_noise_variance, self.log_laplace_scale]])

    @classmethod
    def from_vector(cls, vec) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:-3], vec[-3], vec[-2], vec[-1])

    # vector slots
    def signal_slot(self) -> int:
        return self.d

    def noise_slot(self) -> int:
        return self.d + 1

    def laplace_slot(self) -> int:
        return self.d + 2


def se_ard_kernel(x, z, hyper: Hyperparameters) -> float:
    """Squared-exponential ARD kernel between two points."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("kernel inputs must be finite")
    r = (x - z) / hyper.lengthscales
    return hyper.signal_variance * float(np.exp(-0.5 * np.dot(r, r)))


def se_ard_gram(A, B, hyper: Hyperparameters) -> np.ndarray:
    """Kernel matrix ``K[a, b] = k(A[a], B[b])``."""
    ls = hyper.lengthscales
    A = np.atleast_2d(A) / ls
    B = np.atleast_2d(B) / ls
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


@dataclass(frozen=True)
class BasisExpansion:
    """Generator of feature and prior-precision blocks.

    ``rff_se_ard`` uses paired cos/sin features with ``S = I``;
    ``inducing_point`` uses ``phi_ij = k(x_i, z_j)`` and ``S = K(Z, Z)``;
    ``explicit_dictionary`` takes either a stored ``phi`` matrix or kernel
    ``centers`` together with per-basis log precisions (diagonal ``S``).
    """

    kind: str
    m: int
    hyper: Hyperparameters
    seed: int = 0
    inducing_inputs: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    log_precisions: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.m < 0 or (self.m == 0 and self.kind != DICTIONARY):
            raise ValueError("m must be positive (a pruned dictionary may be empty)")
        if self.kind == RFF and self.m % 2:
            raise ValueError("rff_se_ard needs an even number of basis functions (cos/sin pairs)")
        if self.kind == INDUCING and (self.inducing_inputs is None or len(self.inducing_inputs) != self.m):
            raise ValueError("inducing_point expansion needs m inducing inputs")
        if self.kind == DICTIONARY:
            if (self.phi is None) == (self.inducing_inputs is None):
                raise ValueError("explicit_dictionary needs exactly one of phi or centers")
            width = self.phi.shape[1] if self.phi is not None else len(self.inducing_inputs)
            if width != self.m:
                raise ValueError("dictionary width does not match m")
            if self.log_precisions is None or len(self.log_precisions) != self.m:
                raise ValueError("explicit_dictionary needs m log precisions")

    # -- constructors -----------------------------------------------------
    @classmethod
    def rff(cls, m, hyper, seed=0):
        return cls(RFF, int(m), hyper, seed=int(seed))

    @classmethod
    def inducing(cls, Z, hyper):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return cls(INDUCING, Z.shape[0], hyper, inducing_inputs=Z)

    @classmethod
    def dictionary(cls, hyper, precisions, phi=None, centers=None):
        precisions = np.asarray(precisions, dtype=np.float64)
        if np.any(precisions <= 0):
            raise ValueError("precisions must be positive")
        if phi is not None:
            phi = np.asarray(phi, dtype=np.float64)
            m = phi.shape[1]
        else:
            centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
            m = centers.shape[0]
        return cls(DICTIONARY, m, hyper, inducing_inputs=centers, phi=phi,
                   log_precisions=np.log(precisions))

    def with_hyper(self, hyper: Hyperparameters) -> "BasisExpansion":
        return dataclasses.replace(self, hyper=hyper)

    @property
    def diagonal_precision(self) -> bool:
        return self.kind in (RFF, DICTIONARY)

    @property
    def needs_inputs(self) -> bool:
        return self.phi is None

    # -- rff internals ----------------------------------------------------
    def frequencies(self, freq_idx) -> np.ndarray:
        """Standard-normal frequency vectors ``omega_j`` for the given pair indices."""
        d = self.hyper.d
        freq_idx = np.asarray(freq_idx, dtype=np.int64)
        counters = (freq_idx[:, None] * d + np.arange(d)[None, :]).ravel()
        k = _rng.key(self.seed, _OMEGA_STREAM)
        return _rng.normal(k, counters).reshape(len(freq_idx), d)

    def _rff_parts(self, X, rows, cols):
        xs = np.asarray(X, dtype=np.float64)[rows] / self.hyper.lengthscales
        W = self.frequencies(cols // 2)
        arg = xs @ W.T
        even = (cols % 2) == 0
        amp = np.sqrt(2.0 * self.hyper.signal_variance / self.m)
        return xs, W, arg, even, amp


def _check_index(idx, bound, what):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{what} index out of range [0, {bound})")
    return idx


def _n_rows(expansion, X):
    if expansion.phi is not None:
        return expansion.phi.shape[0]
    return np.asarray(X).shape[0]


def feature_block(expansion: BasisExpansion, X, rows, cols) -> np.ndarray:
    """``Phi[rows, cols]`` with entry ``(a, b) = phi_{cols[b]}(x_{rows[a]})``."""
    rows = _check_index(rows, _n_rows(expansion, X), "row")
    cols = _check_index(cols, expansion.m, "column")
    if expansion.kind == RFF:
        _, _, arg, even, amp = expansion._rff_parts(X, rows, cols)
        return amp * np.where(even[None, :], np.cos(arg), np.sin(arg))
    if expansion.phi is not None:
        return expansion.phi[rows[:, None], cols[None, :]]
    X = np.asarray(X, dtype=np.float64)
    return se_ard_gram(X[rows], expansion.inducing_inputs[cols], expansion.hyper)


def features_at(expansion: BasisExpansion, Xstar, cols=None) -> np.ndarray:
    """Features of arbitrary (e.g. test) inputs; ``cols`` defaults to all basis functions."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    if expansion.phi is not None:
        raise UnsupportedOperation("a stored dictionary cannot be evaluated at new inputs")
    cols = np.arange(expansion.m) if cols is None else np.asarray(cols, dtype=np.int64)
    return feature_block(expansion, Xstar, np.arange(len(Xstar)), cols)


def prior_precision_block(expansion: BasisExpansion, rows, cols) -> np.ndarray:
    """``S[rows, cols]``."""
    rows = _check_index(rows, expansion.m, "row")
    cols = _check_index(cols, expansion.m, "column")
    same = rows[:, None] == cols[None, :]
    if expansion.kind == RFF:
        return same.astype(np.float64)
    if expansion.kind == DICTIONARY:
        return np.where(same, np.exp(expansion.log_precisions[rows])[:, None], 0.0)
    Z = expansion.inducing_inputs
    block = se_ard_gram(Z[rows], Z[cols], expansion.hyper)
    return block + same * (GRAM_JITTER * expansion.hyper.signal_variance)


def prior_precision_diag(expansion: BasisExpansion, idx) -> np.ndarray:
    """Diagonal entries ``S[idx, idx]`` (any kind)."""
    return _precision_diag(expansion, _check_index(idx, expansion.m, "basis"))


def _precision_diag(expansion, idx):
    if expansion.kind == RFF:
        return np.ones(idx.shape[0])
    if expansion.kind == DICTIONARY:
        return np.exp(expansion.log_precisions[idx])
    return np.full(idx.shape[0], expansion.hyper.signal_variance * (1.0 + GRAM_JITTER))


def feature_block_grad_hyper(expansion: BasisExpansion, X, rows, cols) -> np.ndarray:
    """Derivatives of ``Phi[rows, cols]`` w.r.t. each log lengthscale and the log signal variance.

    Returns an array of shape ``(d + 1, len(rows), len(cols))``.
    """
    if expansion.kind != RFF:
        raise UnsupportedOperation("analytic feature gradients are only available for rff_se_ard")
    rows = _check_index(rows, _n_rows(expansion, X), "row")
    cols = _check_index(cols, expansion.m, "column")
    xs, W, arg, even, amp = expansion._rff_parts(X, rows, cols)
    phi = amp * np.where(even[None, :], np.cos(arg), np.sin(arg))
    # d arg / d log l_k = -x_k w_k / l_k
    dtrig = amp * np.where(even[None, :], np.sin(arg), -np.cos(arg))
    d = expansion.hyper.d
    out = np.empty((d + 1, len(rows), len(cols)))
    for k in range(d):
        out[k] = dtrig * np.outer(xs[:, k], W[:, k])
    out[d] = 0.5 * phi
    return out


class BlockFeatures:
    """Feature block for one row/column selection with cheap hyperparameter contractions.

    ``contract(weights)`` returns ``sum(weights * dPhi/dtheta)`` for every
    feature hyperparameter without materializing the ``(d+1)``-stack.
    """

    def __init__(self, expansion: BasisExpansion, X, rows, cols, checked=False):
        self.expansion = expansion
        if not checked:
            rows = _check_index(rows, _n_rows(expansion, X), "row")
            cols = _check_index(cols, expansion.m, "column")
        self.rows, self.cols = rows, cols
        if expansion.kind == RFF:
            xs, W, arg, even, amp = expansion._rff_parts(X, rows, cols)
            c, s = np.cos(arg), np.sin(arg)
            self.phi = amp * np.where(even[None, :], c, s)
            self._dtrig = amp * np.where(even[None, :], s, -c)
            self._xs, self._W = xs, W
        elif expansion.phi is not None:
            self.phi = expansion.phi[rows[:, None], cols[None, :]]
            self._dtrig = None
        else:
            self.phi = feature_block(expansion, X, rows, cols)
            self._dtrig = None

    @property
    def differentiable(self) -> bool:
        return self._dtrig is not None

    def contract(self, weights) -> np.ndarray:
        if self._dtrig is None:
            raise UnsupportedOperation("analytic feature gradients are only available for rff_se_ard")
        M = weights * self._dtrig
        # sum_{a,b} M[a,b] xs[a,k] W[b,k]
        dl = np.einsum("ak,ak->k", self._xs, M @ self._W)
        ds = 0.5 * float(np.sum(weights * self.phi))
        return np.concatenate([dl, [ds]])
