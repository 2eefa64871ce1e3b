"""Empirical summaries of embedding batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from condreg.errors import (
    DegenerateCovarianceError,
    InsufficientSampleError,
    ShapeError,
    SingleClassBatchError,
    UndefinedCorrelationError,
)
from condreg.numerics import as_matrix

STD_FLOOR = 1e-4


@dataclass(frozen=True)
class GaussianDiag:
    """Diagonal Gaussian given by per-dimension mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ShapeError(f"mean and std lengths differ: {mean.size} vs {std.size}")
        if np.any(std <= 0):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        return self.std**2


@dataclass
class LabeledBatch:
    """Embeddings (or raw inputs) with their main and sensitive labels."""

    samples: np.ndarray
    sensitive: np.ndarray
    main: np.ndarray

    def __post_init__(self):
        self.samples = as_matrix(self.samples, "samples")
        self.sensitive = _binary(self.sensitive, "sensitive")
        self.main = _binary(self.main, "main")
        n = self.samples.shape[0]
        if self.sensitive.size != n or self.main.size != n:
            raise ShapeError(
                f"label lengths ({self.sensitive.size}, {self.main.size}) "
                f"do not match {n} rows"
            )

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def take(self, idx) -> "LabeledBatch":
        idx = np.asarray(idx)
        return LabeledBatch(self.samples[idx], self.sensitive[idx], self.main[idx])


def _binary(labels, name):
    arr = np.asarray(labels).reshape(-1)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} labels must be 0/1")
    return arr.astype(np.int64)


def split_by_sensitive(batch: LabeledBatch) -> tuple[np.ndarray, np.ndarray]:
    """Rows with ``sensitive == 0`` and rows with ``sensitive == 1``, order kept."""
    mask = batch.sensitive == 1
    z0, z1 = batch.samples[~mask], batch.samples[mask]
    if len(z0) == 0 or len(z1) == 0:
        raise SingleClassBatchError(
            f"batch has {len(z0)} rows with s=0 and {len(z1)} with s=1"
        )
    return z0, z1


def fit_gaussian_diag(samples) -> GaussianDiag:
    """Column means and unbiased (n-1) standard deviations, floored at ``STD_FLOOR``."""
    x = as_matrix(samples, "samples")
    if x.shape[0] < 2:
        raise InsufficientSampleError("need at least 2 rows to estimate a std")
    std = np.sqrt(np.var(x, axis=0, ddof=1))
    return GaussianDiag(x.mean(axis=0), np.maximum(std, STD_FLOOR))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InsufficientSampleError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def diag_distance(samples) -> float:
    """Relative Frobenius distance between the empirical covariance and its diagonal.

    Returns ``||C - diag(C)||_F / ||C||_F``. The ratio does not depend on the
    covariance normalization (n or n-1).
    """
    x = as_matrix(samples, "samples")
    if x.shape[0] < 2:
        raise InsufficientSampleError("need at least 2 rows for a covariance")
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    total = np.linalg.norm(cov)
    if total == 0:
        raise DegenerateCovarianceError("empirical covariance is zero")
    off = cov - np.diag(np.diag(cov))
    return float(np.linalg.norm(off) / total)
