"""Similarity measures between the two conditional embedding batches.

Every batch-level measure returns a :class:`DivGrad` carrying the value and
its gradient with respect to each input batch, so it can be dropped straight
into a backward pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from condreg.errors import (
    ConvergenceWarning,
    InsufficientSampleError,
    NumericError,
    ParameterError,
    ShapeError,
)
from condreg.numerics import as_matrix, pairwise_sq_dists
from condreg.stats import STD_FLOOR, GaussianDiag, fit_gaussian_diag

BANDWIDTH_FLOOR = 1e-6
FR_RATIO_FLOOR = 1.0 + 1e-12
SQRT2 = math.sqrt(2.0)


@dataclass
class DivGrad:
    value: float
    grad0: np.ndarray
    grad1: np.ndarray


SCALING_STAGE_ITERS = 50


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic OT settings.

    ``epsilon=None`` means scale-relative: ``relative_epsilon`` times the
    median entry of the cross cost matrix. ``scaling`` in (0, 1) turns on
    epsilon annealing: the solver starts at the largest cost entry, shrinks
    epsilon by that factor per stage and warm-starts each stage, which is
    what makes very small epsilon tractable.
    """

    epsilon: Optional[float] = None
    power: int = 2
    max_iter: int = 500
    tol: float = 1e-6
    relative_epsilon: float = 0.1
    scaling: Optional[float] = None

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.power not in (1, 2):
            raise ParameterError("power must be 1 or 2")
        if not self.tol > 0:
            raise ParameterError("tol must be positive")
        if self.max_iter < 1:
            raise ParameterError("max_iter must be at least 1")
        if not self.relative_epsilon > 0:
            raise ParameterError("relative_epsilon must be positive")
        if self.scaling is not None and not 0.0 < self.scaling < 1.0:
            raise ParameterError("scaling must lie in (0, 1)")


@dataclass
class TransportPlan:
    plan: np.ndarray
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    n_iter: int
    residual: float
    converged: bool


def _check_pair(z0, z1, min_rows):
    z0 = as_matrix(z0, "z0")
    z1 = as_matrix(z1, "z1")
    if z0.shape[1] != z1.shape[1]:
        raise ShapeError(f"column mismatch: {z0.shape[1]} vs {z1.shape[1]}")
    if len(z0) < min_rows or len(z1) < min_rows:
        raise InsufficientSampleError(
            f"need at least {min_rows} rows per group, got {len(z0)} and {len(z1)}"
        )
    return z0, z1


# --------------------------------------------------------------------- MMD


def median_bandwidth(z0, z1) -> float:
    """Median pairwise Euclidean distance over the pooled batch (floored)."""
    pooled = np.vstack([as_matrix(z0, "z0"), as_matrix(z1, "z1")])
    if len(pooled) < 2:
        raise InsufficientSampleError("need at least 2 pooled rows")
    iu = np.triu_indices(len(pooled), k=1)
    dists = np.sqrt(pairwise_sq_dists(pooled, pooled)[iu])
    return max(float(np.median(dists)), BANDWIDTH_FLOOR)


def mmd(z0, z1, bandwidth: Optional[float] = None) -> DivGrad:
    """Unbiased MMD^2 estimate with a Gaussian kernel ``exp(-|a-b|^2 / 2 bw^2)``.

    Within-group sums skip the diagonal; the cross sum is complete. With
    ``bandwidth=None`` the median heuristic is used and treated as a constant
    for the gradient.
    """
    z0, z1 = _check_pair(z0, z1, 2)
    if bandwidth is None:
        bandwidth = median_bandwidth(z0, z1)
    if not bandwidth > 0:
        raise ParameterError("bandwidth must be positive")
    n0, n1 = len(z0), len(z1)
    inv2h2 = 1.0 / (2.0 * bandwidth**2)
    k00 = np.exp(-pairwise_sq_dists(z0, z0) * inv2h2)
    k11 = np.exp(-pairwise_sq_dists(z1, z1) * inv2h2)
    k01 = np.exp(-pairwise_sq_dists(z0, z1) * inv2h2)

    c00 = 1.0 / (n0 * (n0 - 1))
    c11 = 1.0 / (n1 * (n1 - 1))
    c01 = 2.0 / (n0 * n1)
    value = (
        c00 * (k00.sum() - np.trace(k00))
        + c11 * (k11.sum() - np.trace(k11))
        - c01 * k01.sum()
    )

    # d k(a,b)/da = -k(a,b) (a-b) / bw^2; diagonal terms vanish since a-b = 0.
    h2 = bandwidth**2
    grad0 = (-2.0 * c00 / h2) * (z0 * k00.sum(1, keepdims=True) - k00 @ z0)
    grad0 += (c01 / h2) * (z0 * k01.sum(1, keepdims=True) - k01 @ z1)
    grad1 = (-2.0 * c11 / h2) * (z1 * k11.sum(1, keepdims=True) - k11 @ z1)
    grad1 += (c01 / h2) * (z1 * k01.sum(0)[:, None] - k01.T @ z0)
    return DivGrad(float(value), grad0, grad1)


# ---------------------------------------------------------------- Sinkhorn


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


def ot_cost(x, y, power: int = 2) -> np.ndarray:
    sq = pairwise_sq_dists(x, y)
    return sq if power == 2 else np.sqrt(sq)


def resolve_epsilon(cost: np.ndarray, cfg: SinkhornConfig) -> float:
    if cfg.epsilon is not None:
        return float(cfg.epsilon)
    med = float(np.median(cost))
    if med <= 0:
        med = float(cost.mean())
    return cfg.relative_epsilon * med if med > 0 else cfg.relative_epsilon


def sinkhorn_plan(cost, cfg: SinkhornConfig = SinkhornConfig(), epsilon=None) -> TransportPlan:
    """Entropic OT plan between uniform marginals, log-domain Sinkhorn-Knopp.

    Iterates dual-potential updates until the L1 marginal residual falls below
    ``cfg.tol`` or ``cfg.max_iter`` is hit (a :class:`ConvergenceWarning` is
    emitted in that case). ``epsilon`` overrides the value resolved from
    ``cfg``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError("cost must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost contains non-finite entries")
    if np.any(cost < 0):
        raise ParameterError("cost entries must be nonnegative")
    eps = resolve_epsilon(cost, cfg) if epsilon is None else float(epsilon)
    n0, n1 = cost.shape
    if n0 == n1 and np.array_equal(cost, cost.T):
        plan, f, residual, it = _symmetric_potential(cost, cfg, eps)
        return _finish(plan, f, f.copy(), eps, it, residual, cfg)
    f, g = np.zeros(n0), np.zeros(n1)
    used = 0
    if cfg.scaling is not None:
        stage = float(cost.max())
        while stage * cfg.scaling > eps:
            stage *= cfg.scaling
            # intermediate stages only supply a warm start
            f, g, _, _, it = _alternate(cost, stage, f, g, cfg.tol, SCALING_STAGE_ITERS)
            used += it
    f, g, plan, residual, it = _alternate(cost, eps, f, g, cfg.tol, cfg.max_iter)
    return _finish(plan, f, g, eps, used + it, residual, cfg)


def _alternate(cost, eps, f, g, tol, max_iter):
    """Alternating log-domain potential updates from a warm start."""
    n0, n1 = cost.shape
    log_a = np.full(n0, -math.log(n0))
    log_b = np.full(n1, -math.log(n1))
    residual, it, plan = math.inf, 0, None
    for it in range(1, max_iter + 1):
        f = -eps * _lse(log_b[None, :] + (g[None, :] - cost) / eps, axis=1)
        g = -eps * _lse(log_a[:, None] + (f[:, None] - cost) / eps, axis=0)
        plan = np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / eps)
        # column marginals are exact after the g update
        residual = float(np.abs(plan.sum(1) - 1.0 / n0).sum())
        if residual < tol:
            break
    return f, g, plan, residual, it


def _finish(plan, f, g, eps, it, residual, cfg):
    converged = residual < cfg.tol
    if not converged:
        warnings.warn(
            f"Sinkhorn stopped after {it} iterations with residual {residual:.3g}",
            ConvergenceWarning,
            stacklevel=3,
        )
    return TransportPlan(plan, f, g, eps, it, residual, converged)


def _symmetric_potential(cost, cfg, eps):
    """Averaged fixed-point iteration for a symmetric cost with equal marginals.

    Plain alternating updates crawl on symmetric problems; averaging the
    potential with its update converges in a handful of iterations.
    """
    n = cost.shape[0]
    log_a = np.full(n, -math.log(n))
    a = np.exp(log_a)
    f = np.zeros(n)
    residual, it, plan = math.inf, 0, None
    for it in range(1, cfg.max_iter + 1):
        f = 0.5 * (f - eps * _lse(log_a[None, :] + (f[None, :] - cost) / eps, axis=1))
        plan = np.exp(log_a[:, None] + log_a[None, :] + (f[:, None] + f[None, :] - cost) / eps)
        residual = 2.0 * float(np.abs(plan.sum(1) - a).sum())
        if residual < cfg.tol:
            break
    return plan, f, residual, it


def _entropic_value(plan, cost, eps):
    nz = plan > 0
    return float((plan * cost).sum() + eps * (plan[nz] * np.log(plan[nz])).sum())


def wasserstein_eps(z0, z1, cfg: SinkhornConfig = SinkhornConfig()) -> float:
    """Entropic OT cost <P, D> + eps * sum P log P at the Sinkhorn plan."""
    z0, z1 = _check_pair(z0, z1, 1)
    cost = ot_cost(z0, z1, cfg.power)
    tp = sinkhorn_plan(cost, cfg)
    return _entropic_value(tp.plan, cost, tp.epsilon)


def _plan_cost_grads(x, y, plan, power):
    """Gradients of <plan, C(x, y)> in x and y with the plan held fixed."""
    if power == 2:
        gx = 2.0 * (x * plan.sum(1, keepdims=True) - plan @ y)
        gy = 2.0 * (y * plan.sum(0)[:, None] - plan.T @ x)
        return gx, gy
    diff = x[:, None, :] - y[None, :, :]
    norm = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    w = np.divide(plan, norm, out=np.zeros_like(plan), where=norm > 0)
    gx = np.einsum("ij,ijk->ik", w, diff)
    gy = -np.einsum("ij,ijk->jk", w, diff)
    return gx, gy


def sinkhorn_divergence(z0, z1, cfg: SinkhornConfig = SinkhornConfig()) -> DivGrad:
    """Debiased Sinkhorn divergence W(0,1) - (W(0,0) + W(1,1)) / 2.

    One epsilon (resolved from the cross cost) is shared by all three
    problems. Gradients hold each transport plan fixed at its optimum.
    """
    z0, z1 = _check_pair(z0, z1, 1)
    p = cfg.power
    c01 = ot_cost(z0, z1, p)
    eps = resolve_epsilon(c01, cfg)
    c00 = ot_cost(z0, z0, p)
    c11 = ot_cost(z1, z1, p)
    p01 = sinkhorn_plan(c01, cfg, eps).plan
    p00 = sinkhorn_plan(c00, cfg, eps).plan
    p11 = sinkhorn_plan(c11, cfg, eps).plan
    value = _entropic_value(p01, c01, eps) - 0.5 * (
        _entropic_value(p00, c00, eps) + _entropic_value(p11, c11, eps)
    )
    g0, g1 = _plan_cost_grads(z0, z1, p01, p)
    a0, b0 = _plan_cost_grads(z0, z0, p00, p)
    a1, b1 = _plan_cost_grads(z1, z1, p11, p)
    grad0 = g0 - 0.5 * (a0 + b0)
    grad1 = g1 - 0.5 * (a1 + b1)
    return DivGrad(float(value), grad0, grad1)


# ------------------------------------------------------ Gaussian closed forms


def _moments_backward(z, gaussian: GaussianDiag, d_mean, d_std):
    """Pull gradients w.r.t. fitted mean/std back to the sample rows."""
    n = len(z)
    centered = z - gaussian.mean
    raw_std = np.sqrt((centered**2).sum(0) / (n - 1))
    active = raw_std > STD_FLOOR
    scale = np.where(active, d_std / np.where(active, gaussian.std, 1.0) / (n - 1), 0.0)
    return d_mean / n + centered * scale


def _kl_diag_parts(mp, sp, mq, sq):
    """KL(p||q) summed over dimensions, with partials in (mp, sp, mq, sq)."""
    delta = mp - mq
    vq = sq**2
    value = 0.5 * np.sum(
        2.0 * np.log(sq) - 2.0 * np.log(sp) - 1.0 + sp**2 / vq + delta**2 / vq
    )
    d_mp = delta / vq
    d_sp = -1.0 / sp + sp / vq
    d_sq = 1.0 / sq - (sp**2 + delta**2) / sq**3
    return float(value), d_mp, d_sp, -d_mp, d_sq


def kl_gaussian_diag(p: GaussianDiag, q: GaussianDiag) -> float:
    """KL(p || q) for diagonal Gaussians, standard orientation with the 1/2."""
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return max(_kl_diag_parts(p.mean, p.std, q.mean, q.std)[0], 0.0)


def jeffrey(z0, z1) -> DivGrad:
    """Symmetrized KL (KL(0||1) + KL(1||0)) / 2 between fitted diagonal Gaussians."""
    z0, z1 = _check_pair(z0, z1, 2)
    g0, g1 = fit_gaussian_diag(z0), fit_gaussian_diag(z1)
    v01, dm0, ds0, dm1, ds1 = _kl_diag_parts(g0.mean, g0.std, g1.mean, g1.std)
    v10, em1, es1, em0, es0 = _kl_diag_parts(g1.mean, g1.std, g0.mean, g0.std)
    value = 0.5 * (v01 + v10)
    grad0 = _moments_backward(z0, g0, 0.5 * (dm0 + em0), 0.5 * (ds0 + es0))
    grad1 = _moments_backward(z1, g1, 0.5 * (dm1 + em1), 0.5 * (ds1 + es1))
    return DivGrad(max(value, 0.0), grad0, grad1)


def _fr_uni_parts(m0, s0, m1, s1):
    """Univariate Fisher-Rao distance and partials in (m0, s0, m1, s1).

    Uses (A+B)/(A-B) = (A+B)^2 / (4 s0 s1), which avoids the cancellation in
    the denominator. Broadcasts over arrays.
    """
    dm = m0 - m1
    half = 0.5 * dm**2
    big = np.sqrt(half + (s0 + s1) ** 2)
    small = np.sqrt(half + (s0 - s1) ** 2)
    ratio = (big + small) ** 2 / (4.0 * s0 * s1)
    active = ratio > FR_RATIO_FLOOR
    dist = SQRT2 * np.log(np.maximum(ratio, FR_RATIO_FLOOR))
    safe_small = np.where(active, small, 1.0)
    dL_ddm = np.where(active, dm / (big * safe_small), 0.0)
    common = 2.0 / (big + small)
    dL_ds0 = np.where(
        active, common * ((s0 + s1) / big + (s0 - s1) / safe_small) - 1.0 / s0, 0.0
    )
    dL_ds1 = np.where(
        active, common * ((s0 + s1) / big - (s0 - s1) / safe_small) - 1.0 / s1, 0.0
    )
    return dist, SQRT2 * dL_ddm, SQRT2 * dL_ds0, -SQRT2 * dL_ddm, SQRT2 * dL_ds1


def fisher_rao_uni(m0: float, s0: float, m1: float, s1: float) -> float:
    """Fisher-Rao distance between N(m0, s0^2) and N(m1, s1^2)."""
    if not (s0 > 0 and s1 > 0):
        raise ParameterError("standard deviations must be positive")
    return float(_fr_uni_parts(float(m0), float(s0), float(m1), float(s1))[0])


def fisher_rao(z0, z1) -> DivGrad:
    """Root-sum-of-squares of per-dimension univariate Fisher-Rao distances."""
    z0, z1 = _check_pair(z0, z1, 2)
    g0, g1 = fit_gaussian_diag(z0), fit_gaussian_diag(z1)
    dist, d_m0, d_s0, d_m1, d_s1 = _fr_uni_parts(g0.mean, g0.std, g1.mean, g1.std)
    value = float(np.sqrt(np.sum(dist**2)))
    if value > 0:
        w = dist / value
    else:
        w = np.zeros_like(dist)
    grad0 = _moments_backward(z0, g0, w * d_m0, w * d_s0)
    grad1 = _moments_backward(z1, g1, w * d_m1, w * d_s1)
    return DivGrad(value, grad0, grad1)


def gaussian_wasserstein(z0, z1) -> DivGrad:
    """Closed-form squared 2-Wasserstein distance between fitted diagonal Gaussians.

    For diagonal covariances the trace term collapses to sum_j (s0_j - s1_j)^2.
    """
    z0, z1 = _check_pair(z0, z1, 2)
    g0, g1 = fit_gaussian_diag(z0), fit_gaussian_diag(z1)
    dm = g0.mean - g1.mean
    ds = g0.std - g1.std
    value = float(dm @ dm + ds @ ds)
    grad0 = _moments_backward(z0, g0, 2.0 * dm, 2.0 * ds)
    grad1 = _moments_backward(z1, g1, -2.0 * dm, -2.0 * ds)
    return DivGrad(value, grad0, grad1)


# ----------------------------------------------------------------- registry

MEASURES = ("mmd", "sinkhorn", "jeffrey", "fisher_rao", "gaussian_w")


def get_measure(
    name: str,
    bandwidth: Optional[float] = None,
    sinkhorn: Optional[SinkhornConfig] = None,
) -> Callable[[np.ndarray, np.ndarray], DivGrad]:
    """Look up a measure by name, binding its tuning options."""
    if name == "mmd":
        return lambda z0, z1: mmd(z0, z1, bandwidth)
    if name == "sinkhorn":
        cfg = sinkhorn or SinkhornConfig()

        def _sd(z0, z1):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                return sinkhorn_divergence(z0, z1, cfg)

        return _sd
    if name == "jeffrey":
        return jeffrey
    if name == "fisher_rao":
        return fisher_rao
    if name == "gaussian_w":
        return gaussian_wasserstein
    raise ParameterError(f"unknown measure {name!r}; expected one of {MEASURES}")
