"""Dense linear-algebra helpers, seeded RNG construction and a central
finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable

import numpy as np

from condreg.errors import NumericError, ParameterError, ShapeError

DEFAULT_FD_STEP = 1e-5


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, raising on bad rank or NaN/inf."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def pairwise_sq_dists(x, y) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``x`` and ``y``.

    Uses explicit differences rather than the ``|x|^2 + |y|^2 - 2xy`` expansion
    so the diagonal is exactly zero when ``x is y`` and no entry goes negative.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"column mismatch: {x.shape[1]} vs {y.shape[1]}")
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x,
    h: float = DEFAULT_FD_STEP,
    coords=None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    Args:
        f: Scalar function of an array shaped like ``x``.
        x: Evaluation point.
        h: Step size.
        coords: Optional iterable of flat indices; other entries of the result
            are left at zero. Useful when ``f`` is expensive.

    Returns:
        Array shaped like ``x`` holding ``(f(x+h e) - f(x-h e)) / 2h``.
    """
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + h
        fp = float(f(x))
        flat[idx] = orig - h
        fm = float(f(x))
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near flat index {idx}")
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Largest entrywise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
