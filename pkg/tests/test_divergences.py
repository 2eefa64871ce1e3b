import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condreg.divergences import (
    SinkhornConfig,
    fisher_rao,
    fisher_rao_uni,
    gaussian_wasserstein,
    get_measure,
    jeffrey,
    kl_gaussian_diag,
    median_bandwidth,
    mmd,
    ot_cost,
    sinkhorn_divergence,
    sinkhorn_plan,
    wasserstein_eps,
)
from condreg.errors import (
    ConvergenceWarning,
    InsufficientSampleError,
    ParameterError,
    ShapeError,
)
from condreg.numerics import finite_diff_grad, relative_error
from condreg.stats import GaussianDiag, fit_gaussian_diag

from oracles import exact_ot_permutations, kl_monte_carlo, mmd_loops, unbiased_mean_std

FD_SD_CFG = SinkhornConfig(epsilon=0.5, max_iter=5000, tol=1e-12)
MEASURE_FNS = {
    "mmd": lambda a, b: mmd(a, b, 1.5),
    "sinkhorn": lambda a, b: sinkhorn_divergence(a, b, FD_SD_CFG),
    "jeffrey": jeffrey,
    "fisher_rao": fisher_rao,
    "gaussian_w": gaussian_wasserstein,
}


# ---------------------------------------------------------------------- MMD


def test_mmd_coincident_batches_is_zero():
    z = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert mmd(z, z.copy(), 1.0).value == 0.0


def test_mmd_far_apart_batches():
    c = np.array([30.0, 40.0])
    z0 = np.zeros((2, 2))
    z1 = np.tile(c, (2, 1))
    expected = 2 - 2 * math.exp(-2500 / 2)
    assert mmd(z0, z1, 1.0).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.0)


def test_mmd_matches_loop_oracle_and_fd(rng):
    z0, z1 = rng.normal(size=(5, 3)), rng.normal(size=(7, 3)) + 0.4
    res = mmd(z0, z1, 1.2)
    assert abs(res.value - mmd_loops(z0, z1, 1.2)) < 1e-12
    fd0 = finite_diff_grad(lambda a: mmd(a, z1, 1.2).value, z0)
    fd1 = finite_diff_grad(lambda b: mmd(z0, b, 1.2).value, z1)
    assert relative_error(res.grad0, fd0) < 1e-4
    assert relative_error(res.grad1, fd1) < 1e-4


def test_mmd_unbiased_estimate_can_dip_below_zero():
    # same-distribution samples: the U-statistic is centred on 0, not floored at 0
    r = np.random.default_rng(1)
    values = [mmd(r.normal(size=(6, 2)), r.normal(size=(6, 2)), 1.0).value for _ in range(200)]
    assert min(values) < 0 < max(values)
    assert abs(np.mean(values)) < 0.02


def test_mmd_positive_for_separated_batches(rng):
    z0, z1 = rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 3.0
    # population value is 2/3 - 2 exp(-3)/3 for unit Gaussians in 2-D
    assert mmd(z0, z1, 1.0).value > 0.3


def test_mmd_errors():
    with pytest.raises(InsufficientSampleError):
        mmd(np.ones((1, 2)), np.ones((3, 2)), 1.0)
    with pytest.raises(ParameterError):
        mmd(np.ones((2, 2)), np.ones((3, 2)), 0.0)
    with pytest.raises(ShapeError):
        mmd(np.ones((2, 2)), np.ones((3, 3)), 1.0)


def test_median_bandwidth():
    assert median_bandwidth([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
    assert median_bandwidth(np.ones((3, 2)), np.ones((2, 2))) == 1e-6


def test_median_bandwidth_sort_oracle(rng):
    z0, z1 = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    pooled = np.vstack([z0, z1])
    dists = sorted(
        np.linalg.norm(pooled[i] - pooled[j])
        for i in range(len(pooled))
        for j in range(i + 1, len(pooled))
    )
    m = len(dists)
    med = dists[m // 2] if m % 2 else 0.5 * (dists[m // 2 - 1] + dists[m // 2])
    assert median_bandwidth(z0, z1) == pytest.approx(med, rel=1e-12)


# ----------------------------------------------------------------- Sinkhorn


def test_sinkhorn_single_point():
    tp = sinkhorn_plan([[3.0]], SinkhornConfig(epsilon=0.1))
    np.testing.assert_allclose(tp.plan, [[1.0]])
    assert tp.residual < 1e-12 and tp.converged


def test_sinkhorn_two_by_two_matches_exhaustive():
    m, eps = 10.0, 1e-3
    cost = np.array([[0.0, m], [m, 0.0]])
    tp = sinkhorn_plan(cost, SinkhornConfig(epsilon=eps, max_iter=2000))
    # uniform-marginal 2x2 couplings are [[t, .5-t], [.5-t, t]]
    best, best_obj = None, np.inf
    for t in np.linspace(0.0, 0.5, 50001):
        p = np.array([[t, 0.5 - t], [0.5 - t, t]])
        nz = p > 0
        obj = (p * cost).sum() + eps * (p[nz] * np.log(p[nz])).sum()
        if obj < best_obj:
            best, best_obj = p, obj
    np.testing.assert_allclose(tp.plan, best, atol=1e-3)
    np.testing.assert_allclose(tp.plan, [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)


def test_sinkhorn_identical_points_concentrate_on_diagonal():
    # well-separated points: nearest-neighbour cost must dominate epsilon
    x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    cost = ot_cost(x, x)
    eps = 0.01 * float(np.median(cost))
    tp = sinkhorn_plan(cost, SinkhornConfig(epsilon=eps, max_iter=5000))
    assert np.all(np.diag(tp.plan) >= 0.99 / 6)


def test_sinkhorn_marginals_within_tol(rng):
    cost = ot_cost(rng.normal(size=(7, 3)), rng.normal(size=(5, 3)))
    cfg = SinkhornConfig(tol=1e-8, max_iter=5000)
    tp = sinkhorn_plan(cost, cfg)
    assert tp.converged
    l1 = np.abs(tp.plan.sum(1) - 1 / 7).sum() + np.abs(tp.plan.sum(0) - 1 / 5).sum()
    assert l1 < cfg.tol
    assert np.all(tp.plan >= 0)


def test_sinkhorn_input_errors():
    with pytest.raises(ParameterError):
        sinkhorn_plan([[-1.0]])
    with pytest.raises(Exception):
        sinkhorn_plan([[np.nan]])


def test_sinkhorn_nonconvergence_warns(rng):
    cost = ot_cost(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    with pytest.warns(ConvergenceWarning):
        tp = sinkhorn_plan(cost, SinkhornConfig(epsilon=1e-3, max_iter=2, tol=1e-12))
    assert not tp.converged and tp.n_iter == 2


def test_wasserstein_eps_singletons():
    a, b = np.array([[1.0, 2.0]]), np.array([[4.0, 6.0]])
    assert wasserstein_eps(a, b, SinkhornConfig(power=2)) == pytest.approx(25.0)
    assert wasserstein_eps(a, b, SinkhornConfig(power=1)) == pytest.approx(5.0)


@pytest.mark.parametrize("seed", range(5))
def test_wasserstein_eps_matches_exhaustive(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(4, 2)), r.normal(size=(4, 2))
    exact = exact_ot_permutations(x, y)
    cfg = SinkhornConfig(epsilon=1e-3, max_iter=20000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        approx = wasserstein_eps(x, y, cfg)
    assert abs(approx - exact) / exact < 1e-2


def test_epsilon_scaling_reaches_small_epsilon(rng):
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    cfg = SinkhornConfig(relative_epsilon=1e-3, scaling=0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tp = sinkhorn_plan(ot_cost(x, y), cfg)
    assert tp.converged
    # the plan is close to a permutation scaled by 1/n
    assert np.sort(tp.plan.max(axis=1)).min() > 0.99 / 5


def test_epsilon_scaling_matches_plain_solver(rng):
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(7, 2))
    cost = ot_cost(x, y)
    plain = sinkhorn_plan(cost, SinkhornConfig(tol=1e-10, max_iter=5000))
    scaled = sinkhorn_plan(cost, SinkhornConfig(tol=1e-10, max_iter=5000, scaling=0.5))
    assert scaled.epsilon == plain.epsilon
    np.testing.assert_allclose(scaled.plan, plain.plan, atol=1e-9)


def test_epsilon_scaling_validation():
    with pytest.raises(ParameterError):
        SinkhornConfig(scaling=1.0)


def test_wasserstein_eps_transport_term_vanishes_for_identical(rng):
    x = rng.normal(size=(5, 2))
    cost = ot_cost(x, x)
    tp = sinkhorn_plan(cost, SinkhornConfig(epsilon=1e-3 * np.median(cost), max_iter=5000))
    assert (tp.plan * cost).sum() < 1e-6


def test_sinkhorn_divergence_self_is_zero(rng):
    z = rng.normal(size=(9, 3))
    assert abs(sinkhorn_divergence(z, z.copy()).value) < 1e-6


def test_sinkhorn_divergence_monotone_translation(rng):
    base = rng.normal(size=(12, 2)) * 0.3
    other = rng.normal(size=(12, 2)) * 0.3
    cfg = SinkhornConfig(epsilon=0.05)
    values = [
        sinkhorn_divergence(base, other + [6.0 - shift, 0.0], cfg).value
        for shift in np.linspace(0.0, 5.0, 5)
    ]
    assert values[0] > 0
    assert all(a > b for a, b in zip(values, values[1:]))


def test_sinkhorn_divergence_gradient_vs_resolved_fd(rng):
    z0, z1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) + 0.5
    res = sinkhorn_divergence(z0, z1, FD_SD_CFG)
    fd0 = finite_diff_grad(lambda a: sinkhorn_divergence(a, z1, FD_SD_CFG).value, z0)
    fd1 = finite_diff_grad(lambda b: sinkhorn_divergence(z0, b, FD_SD_CFG).value, z1)
    assert relative_error(res.grad0, fd0) < 1e-2
    assert relative_error(res.grad1, fd1) < 1e-2


def test_sinkhorn_power_one_gradient(rng):
    cfg = SinkhornConfig(epsilon=0.3, power=1, max_iter=5000, tol=1e-12)
    z0, z1 = rng.normal(size=(5, 2)), rng.normal(size=(4, 2)) + 1.0
    res = sinkhorn_divergence(z0, z1, cfg)
    fd0 = finite_diff_grad(lambda a: sinkhorn_divergence(a, z1, cfg).value, z0)
    assert relative_error(res.grad0, fd0) < 1e-2


# -------------------------------------------------------------- KL / Jeffrey


def test_kl_identity_and_mean_shift():
    p = GaussianDiag([0.3, -1.0], [0.5, 2.0])
    assert kl_gaussian_diag(p, p) == 0.0
    assert kl_gaussian_diag(GaussianDiag([1.0], [1.0]), GaussianDiag([0.0], [1.0])) == pytest.approx(0.5)


def test_kl_variance_ratio_monte_carlo():
    p, q = GaussianDiag([0.0], [2.0]), GaussianDiag([0.0], [1.0])
    closed = kl_gaussian_diag(p, q)
    assert closed == pytest.approx(1.5 - math.log(2), abs=1e-12)
    mc = kl_monte_carlo(p.mean, p.std, q.mean, q.std, 10**6, np.random.default_rng(0))
    assert abs(closed - mc) < 5e-3


def test_kl_shape_error():
    with pytest.raises(ShapeError):
        kl_gaussian_diag(GaussianDiag([0.0], [1.0]), GaussianDiag([0.0, 0.0], [1.0, 1.0]))


def test_jeffrey_identical_and_symmetric(rng):
    z0, z1 = rng.normal(size=(10, 2)), rng.normal(size=(8, 2)) * 2 + 1
    assert jeffrey(z0, z0.copy()).value == 0.0
    assert jeffrey(z0, z1).value == jeffrey(z1, z0).value


def test_jeffrey_composition_oracle_and_fd(rng):
    z0, z1 = rng.normal(size=(10, 2)), rng.normal(size=(10, 2)) * 1.5 + 0.5
    m0, s0 = unbiased_mean_std(z0)
    m1, s1 = unbiased_mean_std(z1)
    p, q = GaussianDiag(m0, s0), GaussianDiag(m1, s1)
    composed = 0.5 * (kl_gaussian_diag(p, q) + kl_gaussian_diag(q, p))
    res = jeffrey(z0, z1)
    assert res.value == pytest.approx(composed, rel=1e-12)
    assert relative_error(res.grad0, finite_diff_grad(lambda a: jeffrey(a, z1).value, z0)) < 1e-4
    assert relative_error(res.grad1, finite_diff_grad(lambda b: jeffrey(z0, b).value, z1)) < 1e-4


# --------------------------------------------------------------- Fisher-Rao


def test_fisher_rao_uni_cases():
    assert fisher_rao_uni(0, 1, 0, 1) < 1e-10
    assert fisher_rao_uni(0, 1, 0, 2) == pytest.approx(math.sqrt(2) * math.log(2), abs=1e-12)
    with pytest.raises(ParameterError):
        fisher_rao_uni(0, 0, 0, 1)


def test_fisher_rao_uni_matches_printed_quotient(rng):
    # direct evaluation of the sqrt-quotient form away from the cancellation
    for _ in range(50):
        m0, m1 = rng.normal(size=2) * 2
        s0, s1 = rng.uniform(0.2, 3.0, size=2)
        h = (m0 - m1) ** 2 / 2
        a = math.sqrt(h + (s0 + s1) ** 2)
        b = math.sqrt(h + (s0 - s1) ** 2)
        direct = math.sqrt(2) * math.log((a + b) / (a - b))
        assert fisher_rao_uni(m0, s0, m1, s1) == pytest.approx(direct, rel=1e-9)


def test_fisher_rao_uni_symmetric(rng):
    for _ in range(100):
        m0, m1 = rng.normal(size=2)
        s0, s1 = rng.uniform(0.1, 5.0, size=2)
        assert fisher_rao_uni(m0, s0, m1, s1) == pytest.approx(fisher_rao_uni(m1, s1, m0, s0), rel=1e-12)


def test_fisher_rao_identical_batches(rng):
    z = rng.normal(size=(12, 3))
    assert fisher_rao(z, z.copy()).value < 1e-6


def test_fisher_rao_single_differing_dimension(rng):
    z0 = rng.normal(size=(12, 3))
    z1 = z0.copy()
    z1[:, 1] = z1[:, 1] * 2.0 + 1.0
    g0, g1 = fit_gaussian_diag(z0), fit_gaussian_diag(z1)
    uni = fisher_rao_uni(g0.mean[1], g0.std[1], g1.mean[1], g1.std[1])
    assert fisher_rao(z0, z1).value == pytest.approx(uni, abs=1e-10)


def test_fisher_rao_gradient(rng):
    z0, z1 = rng.normal(size=(12, 3)), rng.normal(size=(12, 3)) * 1.3 + 0.4
    res = fisher_rao(z0, z1)
    assert relative_error(res.grad0, finite_diff_grad(lambda a: fisher_rao(a, z1).value, z0)) < 1e-4
    assert relative_error(res.grad1, finite_diff_grad(lambda b: fisher_rao(z0, b).value, z1)) < 1e-4


# --------------------------------------------------------- Gaussian-W closed


def test_gaussian_wasserstein_cases(rng):
    z = rng.normal(size=(8, 2))
    assert gaussian_wasserstein(z, z.copy()).value == 0.0
    shifted = z + [3.0, 4.0]
    assert gaussian_wasserstein(z - z.mean(0), shifted - z.mean(0)).value == pytest.approx(25.0)
    a = np.array([[-1.0], [1.0]]) / math.sqrt(2)  # std 1
    b = 3 * a  # std 3, same mean
    assert gaussian_wasserstein(a, b).value == pytest.approx(4.0)


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("name", sorted(MEASURE_FNS))
def test_symmetry(name, rng):
    f = MEASURE_FNS[name]
    z0, z1 = rng.normal(size=(7, 2)), rng.normal(size=(9, 2)) + 0.7
    tol = 1e-8 if name == "sinkhorn" else 1e-10
    assert abs(f(z0, z1).value - f(z1, z0).value) < tol


@pytest.mark.parametrize("name", ["gaussian_w", "jeffrey", "fisher_rao", "sinkhorn"])
def test_nonnegative(name, rng):
    f = MEASURE_FNS[name]
    for _ in range(5):
        z0, z1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        assert f(z0, z1).value >= -1e-8


@pytest.mark.parametrize("name", ["gaussian_w", "jeffrey", "fisher_rao", "mmd"])
def test_separation_nondecreasing(name, rng):
    f = MEASURE_FNS[name]
    z0 = rng.normal(size=(10, 2))
    z1 = rng.normal(size=(10, 2))
    v = np.array([0.6, 0.8])
    # mean-matched start so translation only ever increases the separation
    z1 = z1 - z1.mean(0) + z0.mean(0)
    values = [f(z0, z1 + t * v).value for t in np.linspace(0.0, 2.0, 5)]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("name", sorted(MEASURE_FNS))
def test_gradient_at_random_coordinates(name, rng):
    f = MEASURE_FNS[name]
    z0, z1 = rng.normal(size=(8, 3)), rng.normal(size=(7, 3)) * 1.2 + 0.3
    res = f(z0, z1)
    coords0 = rng.choice(z0.size, 10, replace=False)
    coords1 = rng.choice(z1.size, 10, replace=False)
    fd0 = finite_diff_grad(lambda a: f(a, z1).value, z0, coords=coords0)
    fd1 = finite_diff_grad(lambda b: f(z0, b).value, z1, coords=coords1)
    tol = 1e-2 if name == "sinkhorn" else 1e-4
    assert relative_error(res.grad0.ravel()[coords0], fd0.ravel()[coords0]) < tol
    assert relative_error(res.grad1.ravel()[coords1], fd1.ravel()[coords1]) < tol


@pytest.mark.parametrize("name", sorted(MEASURE_FNS))
def test_translation_directional_derivatives_cancel(name, rng):
    f = MEASURE_FNS[name]
    z0, z1 = rng.normal(size=(6, 2)), rng.normal(size=(8, 2)) + 0.5
    res = f(z0, z1)
    v = np.array([0.3, -1.1])
    d0 = float((res.grad0 @ v).sum())
    d1 = float((res.grad1 @ v).sum())
    assert abs(d0 + d1) < 1e-7 * max(1.0, abs(d0))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**32))
def test_gradient_shapes(n0, n1, seed):
    r = np.random.default_rng(seed)
    z0, z1 = r.normal(size=(n0, 3)), r.normal(size=(n1, 3))
    for name in ("mmd", "jeffrey", "fisher_rao", "gaussian_w", "sinkhorn"):
        res = get_measure(name)(z0, z1)
        assert res.grad0.shape == z0.shape and res.grad1.shape == z1.shape
        assert np.isfinite(res.value)


def test_get_measure_unknown():
    with pytest.raises(ParameterError):
        get_measure("hausdorff")
