"""Dataset loading, standardization and built-in demo data."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .sites import LOGISTIC


@dataclass(frozen=True)
class Standardization:
    """Affine maps ``(x - x_mean) / x_std`` and ``(y - y_mean) / y_std``."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0)

    @classmethod
    def fit(cls, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        x_mean = X.mean(axis=0)
        x_std = X.std(axis=0)
        # zero-variance columns keep a unit divisor
        x_std = np.where(x_std > 0, x_std, 1.0)
        if y is None:
            return cls(x_mean, x_std)
        y = np.asarray(y, dtype=np.float64)
        y_std = float(y.std())
        return cls(x_mean, x_std, float(y.mean()), y_std if y_std > 0 else 1.0)

    def transform_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.x_mean.shape[0]:
            raise DataError(f"expected {self.x_mean.shape[0]} feature columns")
        return (X - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean


@dataclass(frozen=True)
class Dataset:
    """Standardized inputs and targets plus the maps that produced them."""

    X: np.ndarray
    y: np.ndarray
    standardization: Standardization

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def raw_y(self):
        return self.standardization.inverse_y(self.y)


def read_csv(path, has_header=False, delimiter=","):
    """Numeric matrix from a CSV file; errors name the offending row and column (1-based)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, rec in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            vals = []
            for col, cell in enumerate(rec, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {cell!r} at row {lineno}, column {col}") from None
            if rows and len(vals) != len(rows[0]):
                raise DataError(f"{path}: row {lineno} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    A = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise DataError(f"{path}: values must be finite")
    return A


def _labels(y):
    vals = set(np.unique(y).tolist())
    if vals <= {0.0, 1.0}:
        return np.where(y > 0, 1.0, -1.0)
    if vals <= {-1.0, 1.0}:
        return y.copy()
    raise DataError("logistic targets must be in {0, 1} or {-1, +1}")


def split_target(A, target_column=-1):
    d_all = A.shape[1]
    if d_all < 2:
        raise DataError("need at least one feature column and a target column")
    tc = target_column % d_all
    X = np.delete(A, tc, axis=1)
    return X, A[:, tc]


def load_csv(path, *, has_header=False, target_column=-1, delimiter=",", likelihood="gaussian",
             standardization: Standardization = None) -> Dataset:
    """Read ``path``; fit (or apply a given) standardization.

    Regression targets are standardized; logistic labels are mapped to +/-1
    and left unscaled.
    """
    X, y = split_target(read_csv(path, has_header, delimiter), target_column)
    return make_dataset(X, y, likelihood, standardization)


def make_dataset(X, y, likelihood="gaussian", standardization: Standardization = None) -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise DataError("dataset is empty")
    if likelihood == LOGISTIC:
        y = _labels(y)
    if standardization is None:
        standardization = Standardization.fit(X, None if likelihood == LOGISTIC else y)
    Xs = standardization.transform_x(X)
    ys = y if likelihood == LOGISTIC else standardization.transform_y(y)
    return Dataset(Xs, ys, standardization)


def sinc_demo(seed=0, n=500, noise=0.1):
    """Noisy ``sin(x)/x`` on ``x ~ U[-5, 5]`` (raw, unstandardized)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5.0, 5.0, size=n)
    y = np.sinc(x / np.pi) + noise * rng.normal(size=n)
    return x[:, None], y


def blobs_demo(seed=0, n=400, d=2, separation=4.0):
    """Two Gaussian blobs with labels in {0, 1}."""
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 2).astype(np.float64)
    centers = np.zeros((2, d))
    centers[1, 0] = separation
    X = centers[labels.astype(int)] + rng.normal(size=(n, d))
    return X, labels


DEMOS = {"sinc": sinc_demo, "blobs": blobs_demo}
