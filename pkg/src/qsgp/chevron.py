"""Chevron-structured Cholesky factor of the variational covariance.

``C`` is lower triangular; its first ``k`` columns are dense below the
diagonal and the remaining columns are diagonal only.  Storage:

* ``log_diag[r] = log C[r, r]`` for every column,
* ``lower[i, r] = C[i, r]`` for ``r < k`` and ``i > r`` (other entries unused).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidState


@dataclass
class VariationalState:
    mu: np.ndarray
    log_diag: np.ndarray
    lower: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_diag = np.asarray(self.log_diag, dtype=np.float64)
        lower = np.asarray(self.lower, dtype=np.float64)
        if lower.ndim != 2:
            lower = lower.reshape(len(self.mu), -1) if len(self.mu) else np.zeros((0, 0))
        if lower.shape[0] != len(self.mu):
            raise ValueError("lower must have one row per basis function")
        self.lower = lower
        if self.log_diag.shape != self.mu.shape:
            raise ValueError("mu and log_diag must have the same length")
        if not np.all(np.isfinite(self.log_diag)):
            raise InvalidState("diagonal of C must be strictly positive and finite")

    @classmethod
    def zeros(cls, m, k=0, diag=1.0):
        return cls(np.zeros(m), np.full(m, np.log(diag)), np.zeros((m, k)))

    @classmethod
    def from_dense(cls, mu, C, k):
        """Chevron state matching the first ``k`` columns and diagonal of a dense ``C``."""
        C = np.asarray(C, dtype=np.float64)
        m = C.shape[0]
        d = np.diag(C)
        if np.any(d <= 0):
            raise InvalidState("diagonal of C must be strictly positive")
        lower = np.tril(C[:, :k], -1) if k else np.zeros((m, 0))
        return cls(np.array(mu, dtype=np.float64), np.log(d), lower)

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    @property
    def k(self) -> int:
        return self.lower.shape[1]

    def diag(self, idx=None) -> np.ndarray:
        if idx is None:
            return np.exp(self.log_diag)
        return np.exp(self.log_diag[idx])

    def entries(self, rows, cols) -> np.ndarray:
        """``C[rows, cols]`` elementwise (broadcasting)."""
        rows, cols = np.broadcast_arrays(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))
        out = np.zeros(rows.shape)
        on_diag = rows == cols
        out[on_diag] = np.exp(self.log_diag[rows[on_diag]])
        below = (cols < self.k) & (rows > cols)
        if below.any():
            out[below] = self.lower[rows[below], cols[below]]
        return out

    def head_columns(self, rows, head) -> np.ndarray:
        """``C[rows][:, head]`` for dense columns only (every ``head < k``)."""
        below = rows[:, None] > head[None, :]
        out = np.where(below, self.lower[rows[:, None], head[None, :]], 0.0)
        same = rows[:, None] == head[None, :]
        return np.where(same, np.exp(self.log_diag[rows])[:, None], out)

    @staticmethod
    def structural_mask(rows, cols, k) -> np.ndarray:
        """True where ``C[rows, cols]`` is a free parameter of the chevron pattern."""
        rows, cols = np.broadcast_arrays(rows, cols)
        return (rows == cols) | ((cols < k) & (rows > cols))

    def dense(self) -> np.ndarray:
        """Full ``m x m`` factor (oracle use only)."""
        m, k = self.m, self.k
        C = np.diag(np.exp(self.log_diag))
        if k:
            C[:, :k] += np.tril(self.lower, -1)
        return C

    def cov_times(self, v):
        """``C^T v`` for a vector or the rows of a matrix ``v`` (shape ``(..., m)``)."""
        v = np.asarray(v, dtype=np.float64)
        out = v * np.exp(self.log_diag)
        if self.k:
            low = np.tril(self.lower, -1)
            out[..., : self.k] += v @ low
        return out

    def copy(self) -> "VariationalState":
        return VariationalState(self.mu.copy(), self.log_diag.copy(), self.lower.copy(), self.version)
