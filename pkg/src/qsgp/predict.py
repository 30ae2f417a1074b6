"""Predictive distributions and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .chevron import VariationalState
from .errors import UnsupportedOperation
from .features import INDUCING, BasisExpansion, features_at
from .sites import GAUSSIAN, LAPLACE, LIKELIHOODS, LOGISTIC, gauss_hermite

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PredictiveResult:
    """Per-point predictive moments (arrays over test points)."""

    mean: np.ndarray
    variance: np.ndarray
    augmented_variance: Optional[np.ndarray] = None
    probability: Optional[np.ndarray] = None


def _row_chunks(n_rows, m, budget=2_000_000):
    step = max(1, budget // max(m, 1))
    for lo in range(0, n_rows, step):
        yield slice(lo, min(lo + step, n_rows))


def _moments(state: VariationalState, Phi):
    mean = Phi @ state.mu
    V = state.cov_times(Phi)
    return mean, np.einsum("ab,ab->a", V, V)


def predict(state: VariationalState, expansion: BasisExpansion, Xstar=None, *, include_noise=False,
            features=None) -> PredictiveResult:
    """Mean ``phi^T mu`` and variance ``|C^T phi|^2`` (plus the noise variance if requested).

    ``features`` may supply precomputed rows of ``Phi`` instead of inputs.
    """
    if expansion.m != state.m:
        raise ValueError("state and expansion disagree on the number of basis functions")
    if features is not None:
        Phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if Phi.shape[1] != state.m:
            raise ValueError("feature rows have the wrong width")
        mean, var = _moments(state, Phi)
    else:
        Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
        if expansion.needs_inputs and expansion.inducing_inputs is not None:
            d = expansion.inducing_inputs.shape[1]
        else:
            d = expansion.hyper.d
        if Xstar.shape[1] != d:
            raise ValueError(f"inputs have {Xstar.shape[1]} columns, the model expects {d}")
        mean = np.empty(len(Xstar))
        var = np.empty(len(Xstar))
        for sl in _row_chunks(len(Xstar), state.m):
            mean[sl], var[sl] = _moments(state, features_at(expansion, Xstar[sl]))
    if include_noise:
        var = var + expansion.hyper.noise_variance
    return PredictiveResult(mean, var)


def predict_augmented(state: VariationalState, expansion: BasisExpansion, Xstar, sigma2=None) -> PredictiveResult:
    """Predictions with an extra basis function centred on each test input.

    ``augmented = k*^T Sigma k* + sigma2 k**^2 / (k*^T k* + sigma2 k**)``; far from
    the data this returns to the prior variance ``k**``.
    """
    if expansion.kind != INDUCING:
        raise UnsupportedOperation("augmentation is defined for inducing_point expansions")
    if sigma2 is None:
        sigma2 = expansion.hyper.noise_variance
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    kss = expansion.hyper.signal_variance
    mean = np.empty(len(Xstar))
    var = np.empty(len(Xstar))
    aug = np.empty(len(Xstar))
    for sl in _row_chunks(len(Xstar), state.m):
        K = features_at(expansion, Xstar[sl])
        mean[sl], var[sl] = _moments(state, K)
        kk = np.einsum("ab,ab->a", K, K)
        aug[sl] = var[sl] + sigma2 * kss * kss / (kk + sigma2 * kss)
    return PredictiveResult(mean, var, aug)


def class_probability(mean, variance, quad_points=101) -> np.ndarray:
    """``P(y = +1) = E[sigmoid(f)]`` for ``f ~ N(mean, variance)`` by Gauss-Hermite."""
    nodes, weights = gauss_hermite(quad_points)
    f = np.asarray(mean)[:, None] + np.sqrt(np.maximum(variance, 0.0))[:, None] * nodes[None, :]
    p = expit(f) @ weights
    # keep strictly inside (0, 1)
    tiny = np.finfo(np.float64).tiny
    return np.clip(p, tiny, 1.0 - np.finfo(np.float64).epsneg)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mnlp: float
    accuracy: float


def evaluate(result: PredictiveResult, targets, likelihood: str, *, scale=None, quad_points=101) -> Metrics:
    """RMSE, mean negative log predictive probability and (logistic) accuracy.

    Gaussian MNLP uses ``result.variance`` as the full predictive variance,
    so pass predictions made with ``include_noise=True``.  Laplace MNLP
    integrates the Laplace density over the latent Gaussian with ``scale``.
    Logistic accuracy uses the sign of the latent mean.
    """
    if likelihood not in LIKELIHOODS:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    mean = np.asarray(result.mean, dtype=np.float64).reshape(-1)
    var = np.asarray(result.variance, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("no predictions to evaluate")
    if y.shape != mean.shape or var.shape != mean.shape:
        raise ValueError("predictions and targets are misaligned")
    rmse = float(np.sqrt(np.mean((y - mean) ** 2)))
    nan = float("nan")
    if likelihood == GAUSSIAN:
        if np.any(var <= 0):
            raise ValueError("gaussian MNLP needs positive predictive variances")
        nlp = 0.5 * (_LOG_2PI + np.log(var)) + (y - mean) ** 2 / (2.0 * var)
        return Metrics(rmse, float(np.mean(nlp)), nan)
    nodes, weights = gauss_hermite(quad_points)
    f = mean[:, None] + np.sqrt(np.maximum(var, 0.0))[:, None] * nodes[None, :]
    if likelihood == LAPLACE:
        if scale is None or not scale > 0:
            raise ValueError("laplace MNLP needs the scale b")
        logp = -np.log(2.0 * scale) - np.abs(y[:, None] - f) / scale
        lp = logsumexp(logp, axis=1, b=weights[None, :])
        return Metrics(rmse, float(-np.mean(lp)), nan)
    lp = logsumexp(log_expit(y[:, None] * f), axis=1, b=weights[None, :])
    pred = np.where(mean >= 0, 1.0, -1.0)
    return Metrics(nan, float(-np.mean(lp)), float(np.mean(pred == y)))


__all__ = ["PredictiveResult", "Metrics", "predict", "predict_augmented", "class_probability", "evaluate",
           "LOGISTIC"]
