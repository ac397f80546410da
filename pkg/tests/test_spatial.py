import numpy as np
import pytest
import scipy.linalg

from geoftscp.core import SpatialDomain, pairwise_distances
from geoftscp.simstudy import grid_locations, smooth_sd
from geoftscp.spatial import (
    CovParams,
    anisotropic_terms,
    cov_entry,
    cov_matrix,
    fit_mle,
    gaussian_loglik,
    krige_scores,
    matern_corr,
    predict_data,
    vecchia_factor,
)

LOG2PI = np.log(2 * np.pi)


def test_matern_values():
    assert matern_corr(0.0, 0.7, 1.3) == 1.0
    assert matern_corr(0.4, 0.4, 0.5) == pytest.approx(np.exp(-1), abs=1e-12)
    assert matern_corr(0.9, 0.9, 1.5) == pytest.approx((1 + np.sqrt(3)) * np.exp(-np.sqrt(3)), abs=1e-12)
    assert float(matern_corr(0.9, 0.9, 1.5)) == pytest.approx(0.48335, abs=1e-5)


def test_general_nu_matches_closed_forms():
    d = np.linspace(0, 3, 31)
    for nu in (0.5, 1.5, 2.5):
        closed = matern_corr(d, 0.8, nu)
        general = matern_corr(d, 0.8, nu * (1 + 1e-12))
        assert np.allclose(closed, general, atol=1e-8)


def _params(n, rng, kind="matern", **kw):
    return CovParams(kind, rng.uniform(0.5, 2.0, n), rng.uniform(0.1, 0.5, n), **kw)


def test_diagonal_entry(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(4, 2)))
    p = _params(4, rng, alpha=0.3, nu=1.1)
    assert cov_entry(p, dom, 2, 2) == pytest.approx(p.sigma2[2] + p.gamma2[2])


def test_constant_anisotropy_reduces_to_isotropic(rng):
    a = 0.37
    S = np.broadcast_to(a * np.eye(2), (5, 2, 2))
    diff = rng.normal(size=(5, 2))
    d, c = anisotropic_terms(S, S, diff)
    assert np.allclose(c, 1.0, atol=1e-10)
    assert np.allclose(d, np.linalg.norm(diff, axis=1) / np.sqrt(a), atol=1e-10)


def test_aniso_constant_length_scales_match_matern(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(6, 2)))
    alpha = 0.45
    beta = np.zeros((2, 4))
    beta[:, 0] = np.log(alpha)  # chi = alpha, Sigma = alpha^2 I
    pa = _params(6, rng, kind="aniso", nu=0.5, beta=beta)
    pm = CovParams("matern", pa.sigma2, pa.gamma2, nu=0.5, alpha=alpha)
    assert np.allclose(cov_matrix(pa, dom), cov_matrix(pm, dom), atol=1e-10)


def test_generator_covariance_is_psd():
    dom = SpatialDomain.plane(grid_locations())
    sd = smooth_sd(grid_locations())[:, 0]
    C = cov_matrix(CovParams("matern", sd**2, np.full(300, 0.3), nu=0.5, alpha=0.4), dom)
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() > -1e-8 * np.trace(C) / 300


def test_scalar_loglik():
    dom = SpatialDomain.plane([[0.0, 0.0]])
    p = CovParams("matern", [1.3], [0.4])
    z = 0.7
    expect = -0.5 * (np.log(1.7) + z * z / 1.7 + LOG2PI)
    assert gaussian_loglik(np.array([[z]]), p, dom) == pytest.approx(expect, abs=1e-12)


def test_identity_covariance_loglik(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(5, 2)))
    p = CovParams("matern", np.zeros(5), np.ones(5))
    Z = rng.normal(size=(5, 3))
    assert gaussian_loglik(Z, p, dom) == pytest.approx(-0.5 * (np.sum(Z**2) + 15 * LOG2PI), abs=1e-10)


@pytest.mark.parametrize("kind", ["matern", "aniso"])
def test_full_history_vecchia_is_exact(rng, kind):
    dom = SpatialDomain.plane(rng.uniform(size=(6, 2)))
    kw = {"alpha": 0.3, "nu": 0.9} if kind == "matern" else {"nu": 0.9, "kappa": 0.4,
                                                               "beta": rng.normal(scale=0.3, size=(2, 4)) - 1}
    p = _params(6, rng, kind, **kw)
    Z = rng.normal(size=(6, 4))
    exact = gaussian_loglik(Z, p, dom)
    assert gaussian_loglik(Z, p, dom, "vecchia", num_neighbors=5) == pytest.approx(exact, abs=1e-8)
    P = vecchia_factor(p, dom, num_neighbors=5).precision()
    assert np.max(np.abs(P - np.linalg.inv(cov_matrix(p, dom)))) < 1e-8


def test_single_location_factor():
    dom = SpatialDomain.plane([[0.2, 0.1]])
    f = vecchia_factor(CovParams("matern", [2.0], [0.25]), dom, 3)
    assert f.L.toarray()[0, 0] == pytest.approx(1 / np.sqrt(2.25))


def test_vecchia_close_to_exact_at_generator_scale(rng):
    s = grid_locations()
    dom = SpatialDomain.plane(s)
    p = CovParams("matern", smooth_sd(s)[:, 0] ** 2, np.full(300, 0.3), nu=0.5, alpha=0.4)
    L = np.linalg.cholesky(cov_matrix(p, dom))
    Z = L @ rng.normal(size=(300, 15))
    exact = gaussian_loglik(Z, p, dom)
    approx = gaussian_loglik(Z, p, dom, "vecchia", num_neighbors=8)
    assert abs(approx - exact) < 0.01 * abs(exact)


def test_mle_recovers_generator_range():
    rng = np.random.default_rng(2024)
    s = grid_locations()
    dom = SpatialDomain.plane(s)
    sig2 = smooth_sd(s)[:, 0] ** 2
    gam2 = np.full(300, 0.3)
    truth = CovParams("matern", sig2, gam2, nu=0.5, alpha=0.4)
    Z = np.linalg.cholesky(cov_matrix(truth, dom)) @ rng.normal(size=(300, 200))
    fit = fit_mle(Z, dom, sig2, gam2)
    print(f"alpha_hat={fit.params.alpha:.3f} nu_hat={fit.params.nu:.3f}")
    assert 0.25 <= fit.params.alpha <= 0.60
    assert 0.35 <= fit.params.nu <= 0.75


def test_mle_never_worse_than_init(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(30, 2)))
    truth = CovParams("matern", np.ones(30), np.full(30, 0.2), nu=0.5, alpha=0.3)
    Z = np.linalg.cholesky(cov_matrix(truth, dom)) @ rng.normal(size=(30, 10))
    fit = fit_mle(Z, dom, truth.sigma2, truth.gamma2, init=truth)
    assert fit.loglik >= gaussian_loglik(Z, truth, dom) - 1e-12


def test_pure_nugget_loglik(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(20, 2)))
    gam2 = np.full(20, 0.5)
    Z = rng.normal(scale=np.sqrt(0.5), size=(20, 8))
    fit = fit_mle(Z, dom, np.zeros(20), gam2)
    iid = -0.5 * (np.sum(Z**2) / 0.5 + 160 * np.log(0.5) + 160 * LOG2PI)
    assert abs(fit.loglik - iid) < 0.5


def test_krige_identity_without_nugget(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(5, 2)))
    p = CovParams("matern", np.ones(5), np.zeros(5), alpha=0.5)
    Z = rng.normal(size=(5, 3))
    assert np.array_equal(krige_scores(Z, p, dom), Z)


def test_krige_zero_without_signal(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(5, 2)))
    p = CovParams("matern", np.zeros(5), np.full(5, 0.7), alpha=0.5)
    assert np.allclose(krige_scores(rng.normal(size=(5, 3)), p, dom), 0, atol=1e-14)


def test_krige_matches_joint_normal_conditioning(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(5, 2)))
    p = _params(5, rng, alpha=0.4, nu=1.2)
    sd = np.sqrt(p.sigma2)
    K = np.outer(sd, sd) * matern_corr(pairwise_distances(dom), 0.4, 1.2)  # Cov(smooth, smooth)
    joint = np.block([[K, K], [K, K + np.diag(p.gamma2)]])
    Z = rng.normal(size=(5, 2))
    oracle = joint[:5, 5:] @ np.linalg.solve(joint[5:, 5:], Z)
    assert np.max(np.abs(krige_scores(Z, p, dom) - oracle)) < 1e-10


def test_krige_vecchia_full_history_matches_exact(rng):
    dom = SpatialDomain.plane(rng.uniform(size=(7, 2)))
    p = _params(7, rng, alpha=0.4, nu=0.5)
    Z = rng.normal(size=(7, 3))
    assert np.allclose(krige_scores(Z, p, dom, "vecchia", 6), krige_scores(Z, p, dom), atol=1e-10)


class _Mean:
    def __init__(self, surf):
        self.surf = surf

    def surface(self, N):
        return self.surf


def test_predict_data_matches_loops(rng):
    n, N, m, Q = 3, 4, 5, 2
    mu = rng.normal(size=(n, N, m))
    phi = rng.normal(size=(m, Q))
    Zhat = rng.normal(size=(n, N, Q))
    Y = predict_data(_Mean(mu), phi, Zhat)
    for i in range(n):
        for k in range(N):
            for j in range(m):
                expect = mu[i, k, j] + sum(Zhat[i, k, q] * phi[j, q] for q in range(Q))
                assert Y[i, k, j] == pytest.approx(expect, abs=1e-12)


def test_predict_data_zero_scores(rng):
    mu = rng.normal(size=(2, 3, 4))
    assert np.array_equal(predict_data(_Mean(mu), rng.normal(size=(4, 2)), np.zeros((2, 3, 2))), mu)


def test_sphere_anisotropic_covariance_positive_definite(rng):
    lonlat = np.column_stack([rng.uniform(-180, 180, 40), rng.uniform(-70, 70, 40)])
    dom = SpatialDomain.sphere(lonlat)
    beta = np.array([[np.log(800.0), 0.2, 0.3, -0.1], [np.log(500.0), -0.1, 0.2, 0.1]])
    p = CovParams("aniso", np.ones(40), np.full(40, 0.1), nu=1.0, kappa=0.5, beta=beta)
    C = cov_matrix(p, dom)
    assert np.allclose(C, C.T, atol=1e-12)
    scipy.linalg.cholesky(C, lower=True)
