"""Site projections ``g_l`` for the supported likelihoods.

Each likelihood factorizes as ``prod_l g_l(phi_l w)``; all three kinds
have concave ``log g_l``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
LOGISTIC = "logistic"
LIKELIHOODS = (GAUSSIAN, LAPLACE, LOGISTIC)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SiteProjection:
    """Per-row site projections.

    ``scale`` is the noise variance for gaussian sites and the Laplace
    scale ``b`` for laplace sites; it is ignored for logistic sites.
    """

    likelihood: str
    y: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.likelihood == LOGISTIC and not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("logistic targets must be -1 or +1")
        if self.likelihood != LOGISTIC and not self.scale > 0:
            raise ValueError("site scale must be positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def with_scale(self, scale) -> "SiteProjection":
        return SiteProjection(self.likelihood, self.y, scale)

    def _targets(self, rows, u):
        y = self.y if rows is None else self.y[np.asarray(rows)]
        u = np.asarray(u, dtype=np.float64)
        return y.reshape(y.shape + (1,) * (u.ndim - y.ndim)), u

    def log_g(self, u, rows=None):
        """``log g_l(u)``; ``u`` has the row axis first, extra trailing axes broadcast."""
        y, u = self._targets(rows, u)
        if self.likelihood == GAUSSIAN:
            s2 = self.scale
            return -0.5 * (_LOG_2PI + np.log(s2)) - (y - u) ** 2 / (2.0 * s2)
        if self.likelihood == LAPLACE:
            b = self.scale
            return -np.log(2.0 * b) - np.abs(y - u) / b
        return log_expit(y * u)

    def dlog_g(self, u, rows=None):
        """Derivative of ``log g_l`` with respect to its argument."""
        y, u = self._targets(rows, u)
        if self.likelihood == GAUSSIAN:
            return (y - u) / self.scale
        if self.likelihood == LAPLACE:
            return np.sign(y - u) / self.scale
        return y * expit(-y * u)

    def dlog_g_dlogscale(self, u, rows=None):
        """Derivative of ``log g_l`` with respect to ``log scale`` (zero for logistic)."""
        y, u = self._targets(rows, u)
        if self.likelihood == GAUSSIAN:
            return -0.5 + (y - u) ** 2 / (2.0 * self.scale)
        if self.likelihood == LAPLACE:
            return -1.0 + np.abs(y - u) / self.scale
        return np.zeros(np.broadcast(y, u).shape)


def site_log_g(site: SiteProjection, row: int, u: float) -> float:
    """``log g_row(u)`` for a single row."""
    return float(site.log_g(np.asarray([u]), rows=np.asarray([row]))[0])


def gauss_hermite(quad_points: int):
    """Nodes and weights for expectations under ``N(0, 1)``; weights sum to one."""
    if quad_points < 1:
        raise ValueError("quad_points must be at least 1")
    nodes, weights = np.polynomial.hermite_e.hermegauss(int(quad_points))
    return nodes, weights / np.sqrt(2.0 * np.pi)
