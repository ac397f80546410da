"""Randomized invariants, 1000 examples each.

Array contents are drawn from numpy generators seeded by hypothesis so
that every example stays cheap; sizes, scalars and transforms are drawn
directly.
"""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from geoftscp.basis import bspline_basis, eval_bspline, fit_penalized_surface
from geoftscp.changepoint import (
    NullDistribution,
    adjust_pvalues,
    centered_cusum,
    p_value,
    score_statistic,
)
from geoftscp.core import FunctionalDataset, SpatialDomain, distance, uniform_grid
from geoftscp.fpca import eigendecompose, extract_scores, fit_pca, reconstruct, covariance_of_residuals
from geoftscp.spatial import CovParams, cov_entry, cov_matrix, gaussian_loglik, krige_scores, vecchia_factor

TRIALS = settings(max_examples=1000, deadline=None, derandomize=True,
                  suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(0, 2**32 - 1)


def _gen(seed):
    return np.random.default_rng(seed)


def _domain(rng, n, kind):
    if kind == "plane":
        return SpatialDomain.plane(rng.uniform(-2, 2, size=(n, 2)))
    return SpatialDomain.sphere(np.column_stack([rng.uniform(-180, 180, n), rng.uniform(-90, 90, n)]))


def _cov_params(rng, n, kind):
    if kind == "matern":
        return CovParams("matern", rng.uniform(0.2, 2, n), rng.uniform(0.05, 0.5, n),
                         nu=rng.uniform(0.3, 2.5), alpha=rng.uniform(0.1, 1.0))
    beta = np.column_stack([rng.uniform(-1.5, 0, 2), rng.normal(scale=0.2, size=(2, 3))])
    return CovParams("aniso", rng.uniform(0.2, 2, n), rng.uniform(0.05, 0.5, n), nu=rng.uniform(0.3, 2.5),
                     kappa=rng.uniform(-1.5, 1.5), beta=beta)


# ---------------------------------------------------------------------------
# core


@TRIALS
@given(seeds, st.sampled_from(["plane", "sphere"]))
def test_distance_metric_axioms(seed, kind):
    dom = _domain(_gen(seed), 3, kind)
    d01, d12, d02 = distance(dom, 0, 1), distance(dom, 1, 2), distance(dom, 0, 2)
    assert distance(dom, 0, 0) == 0
    assert abs(d01 - distance(dom, 1, 0)) <= 1e-9
    assert d02 <= d01 + d12 + 1e-9 * max(1.0, d02)
    assert d01 >= 0


# ---------------------------------------------------------------------------
# basis


def _pls_problem(rng):
    n, m = int(rng.integers(5, 12)), int(rng.integers(12, 25))
    Ps = rng.normal(size=(n, 3))
    b = bspline_basis(int(rng.integers(5, 9)))
    return n, Ps, eval_bspline(b, uniform_grid(m)), b.penalty, m


@TRIALS
@given(seeds, st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 10))
def test_pls_is_linear(seed, a, c, zeta):
    rng = _gen(seed)
    n, Ps, Pu, Om, m = _pls_problem(rng)
    Y1, Y2 = rng.normal(size=(n, m)), rng.normal(size=(n, m))
    lhs = fit_penalized_surface(a * Y1 + c * Y2, Ps, Pu, zeta, Om)
    rhs = a * fit_penalized_surface(Y1, Ps, Pu, zeta, Om) + c * fit_penalized_surface(Y2, Ps, Pu, zeta, Om)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(lhs)))


@TRIALS
@given(seeds, st.floats(0, 10))
def test_pls_location_permutation(seed, zeta):
    rng = _gen(seed)
    n, Ps, Pu, Om, m = _pls_problem(rng)
    Y = rng.normal(size=(n, m))
    perm = rng.permutation(n)
    a = fit_penalized_surface(Y, Ps, Pu, zeta, Om)
    b = fit_penalized_surface(Y[perm], Ps[perm], Pu, zeta, Om)
    assert np.max(np.abs(a - b)) <= 1e-9 * max(1.0, np.max(np.abs(a)))


@TRIALS
@given(seeds, st.integers(4, 20))
def test_penalty_is_psd(seed, L):
    Om = bspline_basis(L).penalty
    v = _gen(seed).normal(size=L)
    assert v @ Om @ v >= -1e-12 * max(1.0, np.abs(Om).max() * (v @ v))


# ---------------------------------------------------------------------------
# fpca


class _ZeroMean:
    def surface(self, N):
        return 0.0


def _fpca_data(rng):
    n, N, m = int(rng.integers(3, 7)), int(rng.integers(3, 8)), int(rng.integers(6, 12))
    dom = SpatialDomain.plane(rng.uniform(size=(n, 2)))
    return FunctionalDataset(dom, rng.normal(size=(n, N, m)) * rng.uniform(0.5, 2, m), uniform_grid(m))


@TRIALS
@given(seeds, st.integers(1, 4))
def test_fpca_energy_split(seed, Q):
    rng = _gen(seed)
    ds = _fpca_data(rng)
    pca = fit_pca(ds, _ZeroMean(), Q, bandwidth=0.6)
    rest = ds.values - reconstruct(pca.scores, pca.phi)
    captured = np.sum(pca.eigenvalues)
    trailing = np.mean(np.mean(rest**2, axis=-1))
    assert abs(captured + trailing - pca.trace) <= 1e-10 * max(1.0, pca.trace)
    assert np.allclose(np.mean(pca.scores**2, axis=(0, 1)), pca.eigenvalues, rtol=1e-9, atol=1e-12)


@TRIALS
@given(seeds, st.integers(1, 4))
def test_projection_is_idempotent(seed, Q):
    rng = _gen(seed)
    r = rng.normal(size=(3, 5, 9))
    phi, _ = eigendecompose(covariance_of_residuals(r), Q)
    once = reconstruct(extract_scores(r, phi), phi)
    twice = reconstruct(extract_scores(once, phi), phi)
    assert np.max(np.abs(once - twice)) <= 1e-10 * max(1.0, np.abs(once).max())


@TRIALS
@given(seeds)
def test_fpca_year_permutation(seed):
    rng = _gen(seed)
    ds = _fpca_data(rng)
    perm = rng.permutation(ds.N)
    a = fit_pca(ds, _ZeroMean(), 2, bandwidth=0.6)
    b = fit_pca(ds.with_values(ds.values[:, perm]), _ZeroMean(), 2, bandwidth=0.6)
    for x, y in ((a.lambda_hat, b.lambda_hat), (a.sigma2_hat, b.sigma2_hat), (a.gamma2_hat, b.gamma2_hat)):
        assert np.allclose(x, y, rtol=1e-9, atol=1e-12)


@TRIALS
@given(seeds, st.floats(0.01, 100))
def test_fpca_scaling(seed, c):
    rng = _gen(seed)
    ds = _fpca_data(rng)
    a = fit_pca(ds, _ZeroMean(), 2, bandwidth=0.6)
    b = fit_pca(ds.with_values(c * ds.values), _ZeroMean(), 2, bandwidth=0.6)
    for x, y in ((a.lambda_hat, b.lambda_hat), (a.sigma2_hat, b.sigma2_hat), (a.gamma2_hat, b.gamma2_hat)):
        assert np.allclose(c * c * x, y, rtol=1e-10, atol=1e-12 * c * c * max(1.0, np.abs(x).max()))


# ---------------------------------------------------------------------------
# spatial


@TRIALS
@given(seeds, st.sampled_from(["plane", "sphere"]), st.sampled_from(["matern", "aniso"]))
def test_cov_entry_symmetry(seed, dom_kind, kind):
    rng = _gen(seed)
    dom = _domain(rng, 6, dom_kind)
    p = _cov_params(rng, 6, kind)
    if dom_kind == "sphere" and kind == "aniso":
        beta = p.beta.copy()
        beta[:, 0] += np.log(1500.0)  # length scales in km
        p = CovParams("aniso", p.sigma2, p.gamma2, nu=p.nu, kappa=p.kappa, beta=beta)
    i, j = rng.integers(0, 6, 2)
    assert abs(cov_entry(p, dom, i, j) - cov_entry(p, dom, j, i)) <= 1e-12


@TRIALS
@given(seeds, st.floats(-5, 5), st.floats(-5, 5), st.sampled_from(["exact", "vecchia"]))
def test_kriging_is_linear(seed, a, b, method):
    rng = _gen(seed)
    n = int(rng.integers(2, 15))
    dom = _domain(rng, n, "plane")
    p = _cov_params(rng, n, "matern")
    Z1, Z2 = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    lhs = krige_scores(a * Z1 + b * Z2, p, dom, method, 4)
    rhs = a * krige_scores(Z1, p, dom, method, 4) + b * krige_scores(Z2, p, dom, method, 4)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.abs(lhs).max())


@TRIALS
@given(seeds, st.sampled_from(["matern", "aniso"]))
def test_loglik_permutation_invariance(seed, kind):
    rng = _gen(seed)
    n = int(rng.integers(2, 15))
    dom = _domain(rng, n, "plane")
    p = _cov_params(rng, n, kind)
    Z = rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    dp = SpatialDomain.plane(dom.coords[perm])
    pp = CovParams(p.kind, p.sigma2[perm], p.gamma2[perm], p.nu, p.alpha, p.kappa, p.beta)
    a, b = gaussian_loglik(Z, p, dom), gaussian_loglik(Z[perm], pp, dp)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def _kl_to_exact(P, C):
    n = C.shape[0]
    M = P @ C
    _, logdet = np.linalg.slogdet(M)
    return 0.5 * (np.trace(M) - n - logdet)


@TRIALS
@given(seeds)
def test_vecchia_error_shrinks_with_more_neighbours(seed):
    rng = _gen(seed)
    dom = SpatialDomain.plane(rng.uniform(size=(50, 2)))
    p = CovParams("matern", rng.uniform(0.5, 1.5, 50), rng.uniform(0.05, 0.3, 50),
                  nu=rng.uniform(0.3, 1.5), alpha=rng.uniform(0.05, 0.5))
    C = cov_matrix(p, dom)
    kl4 = _kl_to_exact(vecchia_factor(p, dom, 4).precision(), C)
    kl16 = _kl_to_exact(vecchia_factor(p, dom, 16).precision(), C)
    assert kl16 <= kl4 + 1e-9


# ---------------------------------------------------------------------------
# changepoint


def _scores(rng):
    N, Q = int(rng.integers(2, 20)), int(rng.integers(1, 5))
    return rng.normal(size=(N, Q)) * rng.uniform(0.1, 3, Q), rng.uniform(0.1, 3, Q)


@TRIALS
@given(seeds, st.floats(1e-3, 1e3), st.booleans())
def test_score_scale_equivariance(seed, c, flip):
    Z, lam = _scores(_gen(seed))
    c = -c if flip else c
    T, tau = score_statistic(Z, lam)
    T2, tau2 = score_statistic(c * Z, c * c * lam)
    assert abs(T - T2) <= 1e-10 * max(1.0, T)
    assert tau == tau2


@TRIALS
@given(seeds, st.floats(-100, 100))
def test_score_shift_invariance(seed, shift):
    Z, lam = _scores(_gen(seed))
    T, _ = score_statistic(Z, lam)
    T2, _ = score_statistic(Z + shift, lam)
    assert abs(T - T2) <= 1e-9 * max(1.0, T)


@TRIALS
@given(seeds, st.booleans())
def test_score_nonnegative_and_zero_iff_flat(seed, flat):
    rng = _gen(seed)
    Z, lam = _scores(rng)
    if flat:
        Z = np.broadcast_to(rng.normal(size=Z.shape[1]), Z.shape)
    T, _ = score_statistic(Z, lam)
    assert T >= 0
    vanishes = np.allclose(centered_cusum(Z), 0, atol=1e-12)
    assert (T <= 1e-20) == vanishes


@TRIALS
@given(seeds, st.sampled_from([np.exp, np.sqrt, np.log1p, lambda x: x**3 + x]))
def test_argmax_invariant_under_increasing_transform(seed, f):
    Z, lam = _scores(_gen(seed))
    N = Z.shape[0]
    if N < 2:
        return
    _, tau = score_statistic(Z, lam)
    prof = np.sum(centered_cusum(Z)[1:N] ** 2 / lam, axis=-1) / N
    assert np.argmax(f(prof)) + 1 == tau


@TRIALS
@given(seeds, st.floats(-1, 3), st.floats(-1, 3))
def test_p_value_nonincreasing(seed, a, b):
    sample = np.sort(_gen(seed).uniform(0, 2, 10_000))
    null = NullDistribution("score", sample, sample.size, 200, 0, 1)
    lo, hi = min(a, b), max(a, b)
    pl, ph = p_value(lo, null), p_value(hi, null)
    assert pl >= ph and 0 < ph <= 1


@TRIALS
@given(seeds, st.integers(1, 60), st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_bh_dominates_and_nests(seed, n, a1, a2):
    p = _gen(seed).uniform(size=n) ** 3
    p = np.maximum(p, 1e-12)
    adj = adjust_pvalues(p, "bh")
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1)
    assert np.all(adjust_pvalues(p, "bonferroni") >= p)
    lo, hi = min(a1, a2), max(a1, a2)
    assert np.all((adj < lo) <= (adj < hi))
    # step-up definition: rejection count is the largest k with p_(k) <= k alpha / n
    srt = np.sort(p)
    ok = np.flatnonzero(srt <= np.arange(1, n + 1) * hi / n)
    assert np.sum(adj <= hi) == (ok[-1] + 1 if ok.size else 0)
