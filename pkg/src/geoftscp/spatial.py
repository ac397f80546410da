"""Spatial covariance of principal-component score fields.

Each component's scores ``Z_q(s)`` at one year are modelled as a smooth
Gaussian field plus an independent nugget::

    Cov(Z(s1), Z(s2)) = sigma(s1) sigma(s2) c(s1, s2) rho(d(s1, s2)) + 1(s1 = s2) gamma^2(s1)

with ``rho`` a Matern correlation.  ``sigma^2`` and ``gamma^2`` are plug-in
estimates held fixed; only the correlation parameters are fitted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.special import gammaln, kve

from .core import GeoFTSError, SpatialDomain, pairwise_distances

NU_BOUNDS = (0.05, 4.5)
LOG_2PI = np.log(2 * np.pi)


class NotPositiveDefinite(GeoFTSError):
    pass


class SingularAnisotropy(GeoFTSError):
    pass


class MaxIterationsWarning(UserWarning):
    pass


def matern_corr(d, alpha, nu):
    """Matern correlation ``2^(1-nu)/Gamma(nu) x^nu K_nu(x)`` with ``x = sqrt(2 nu) d / alpha``.

    ``nu = 1/2`` is exactly ``exp(-d / alpha)``.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    if not (alpha > 0 and nu > 0):
        raise ValueError("alpha and nu must be positive")
    if nu == 0.5:
        return np.exp(-d / alpha)
    x = np.sqrt(2 * nu) * d / alpha
    if nu == 1.5:
        return (1 + x) * np.exp(-x)
    if nu == 2.5:
        return (1 + x + x * x / 3) * np.exp(-x)
    out = np.ones_like(x)
    pos = x > 1e-12
    xp = x[pos]
    with np.errstate(divide="ignore", over="ignore"):
        logr = (1 - nu) * np.log(2) - gammaln(nu) + nu * np.log(xp) + np.log(kve(nu, xp)) - xp
    out[pos] = np.where(np.isfinite(logr), np.exp(np.minimum(logr, 0.0)), 0.0)
    return out


@dataclass(frozen=True, eq=False)
class CovParams:
    """Correlation model plus the plugged-in variance fields.

    ``kind="matern"`` uses ``alpha`` (range) and ``nu``.  ``kind="aniso"``
    uses ``nu``, the rotation angle ``kappa`` and ``beta[r, :]`` giving the
    log length scales ``beta_r0 + beta_r1 f1(s) + beta_r2 f2(s) + beta_r3 f2(s)^2``
    (``f1 = sin(lon)``, ``f2 = lat`` in radians on the sphere; ``f1 = x``,
    ``f2 = y`` on the plane).
    """

    kind: Literal["matern", "aniso"]
    sigma2: np.ndarray
    gamma2: np.ndarray
    nu: float = 0.5
    alpha: float = 1.0
    kappa: float = 0.0
    beta: np.ndarray = field(default_factory=lambda: np.zeros((2, 4)))

    def __post_init__(self):
        if self.kind not in ("matern", "aniso"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float))
        object.__setattr__(self, "gamma2", np.asarray(self.gamma2, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(2, 4))
        if not (self.alpha > 0 and self.nu > 0):
            raise ValueError("alpha and nu must be positive")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "nu": float(self.nu)}
        if self.kind == "matern":
            d["alpha"] = float(self.alpha)
        else:
            d["kappa"] = float(self.kappa)
            d["beta"] = self.beta.tolist()
        return d


# ---------------------------------------------------------------------------
# anisotropy


def _aniso_covariates(domain: SpatialDomain):
    if domain.kind == "sphere":
        lon = np.radians(domain.coords[:, 0])
        lat = np.radians(domain.coords[:, 1])
        return np.sin(lon), lat
    return domain.coords[:, 0], domain.coords[:, 1]


def length_scales(params: CovParams, domain: SpatialDomain) -> np.ndarray:
    """``chi[i, r] = exp(beta_r0 + beta_r1 f1 + beta_r2 f2 + beta_r3 f2^2)``."""
    f1, f2 = _aniso_covariates(domain)
    X = np.column_stack([np.ones_like(f1), f1, f2, f2 * f2])
    return np.exp(X @ params.beta.T)


def anisotropy_matrices(params: CovParams, domain: SpatialDomain) -> np.ndarray:
    """Per-location ``Sigma(s)`` acting on embedding differences.

    On the plane ``Sigma = R(kappa) diag(chi1^2, chi2^2) R(kappa)^T``.  On the
    sphere the same ellipse is laid in the tangent plane (east/north axes
    rotated by ``kappa``) and completed with ``chi1 chi2`` along the outward
    normal, giving a 3x3 matrix on chordal differences in km.
    """
    chi = length_scales(params, domain)
    ck, sk = np.cos(params.kappa), np.sin(params.kappa)
    if domain.kind == "plane":
        a1 = np.tile([ck, sk], (domain.n, 1))
        a2 = np.tile([-sk, ck], (domain.n, 1))
        S = chi[:, 0, None, None] ** 2 * np.einsum("ni,nj->nij", a1, a1)
        S += chi[:, 1, None, None] ** 2 * np.einsum("ni,nj->nij", a2, a2)
        return S
    lon = np.radians(domain.coords[:, 0])
    lat = np.radians(domain.coords[:, 1])
    east = np.column_stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)])
    north = np.column_stack([-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)])
    normal = np.asarray(domain.xyz)
    a1 = ck * east + sk * north
    a2 = -sk * east + ck * north
    S = chi[:, 0, None, None] ** 2 * np.einsum("ni,nj->nij", a1, a1)
    S += chi[:, 1, None, None] ** 2 * np.einsum("ni,nj->nij", a2, a2)
    S += (chi[:, 0] * chi[:, 1])[:, None, None] * np.einsum("ni,nj->nij", normal, normal)
    return S


def anisotropic_terms(S1: np.ndarray, S2: np.ndarray, diff: np.ndarray):
    """Scaled distance ``d`` and normalizer ``c`` for batched ``Sigma`` pairs.

    ``d^2 = 2 diff^T (S1 + S2)^{-1} diff`` and
    ``c^2 = |S1|^{1/2} |S2|^{1/2} / |(S1 + S2) / 2|``.
    """
    Ssum = S1 + S2
    det1 = np.linalg.det(S1)
    det2 = np.linalg.det(S2)
    detm = np.linalg.det(0.5 * Ssum)
    if np.any(det1 <= 1e-300) or np.any(det2 <= 1e-300) or np.any(detm <= 1e-300):
        raise SingularAnisotropy("anisotropy matrix determinant <= 1e-300")
    sol = np.linalg.solve(Ssum, diff[..., None])[..., 0]
    d2 = 2 * np.einsum("...i,...i->...", diff, sol)
    c2 = np.sqrt(det1) * np.sqrt(det2) / detm
    return np.sqrt(np.clip(d2, 0, None)), np.sqrt(c2)


# ---------------------------------------------------------------------------
# covariance assembly


class _CovModel:
    """Evaluates covariances between arbitrary index pairs for one ``CovParams``."""

    def __init__(self, params: CovParams, domain: SpatialDomain):
        self.params = params
        self.domain = domain
        self.emb = domain.embedding()
        self.sd = np.sqrt(params.sigma2)
        self.S = anisotropy_matrices(params, domain) if params.kind == "aniso" else None

    def signal(self, ia, ib) -> np.ndarray:
        """``sigma(a) sigma(b) c(a, b) rho(d(a, b))`` elementwise over broadcast index arrays."""
        ia, ib = np.broadcast_arrays(np.asarray(ia), np.asarray(ib))
        diff = self.emb[ia] - self.emb[ib]
        p = self.params
        if p.kind == "matern":
            d = np.sqrt(np.einsum("...i,...i->...", diff, diff))
            corr = matern_corr(d, p.alpha, p.nu)
        else:
            d, c = anisotropic_terms(self.S[ia], self.S[ib], diff)
            corr = c * matern_corr(d, 1.0, p.nu)
        return self.sd[ia] * self.sd[ib] * corr

    def full(self) -> np.ndarray:
        idx = np.arange(self.domain.n)
        if self.params.kind == "matern":
            D = pairwise_distances(self.domain)
            K = np.outer(self.sd, self.sd) * matern_corr(D, self.params.alpha, self.params.nu)
        else:
            K = self.signal(idx[:, None], idx[None, :])
        K = 0.5 * (K + K.T)
        K[idx, idx] += self.params.gamma2
        return K


def cov_matrix(params: CovParams, domain: SpatialDomain) -> np.ndarray:
    """Full ``n x n`` covariance including the nugget."""
    return _CovModel(params, domain).full()


def signal_matrix(params: CovParams, domain: SpatialDomain) -> np.ndarray:
    """Covariance of the smooth field with the observed scores (nugget removed)."""
    C = cov_matrix(params, domain)
    C[np.diag_indices_from(C)] -= params.gamma2
    return C


def cov_entry(params: CovParams, domain: SpatialDomain, i1: int, i2: int) -> float:
    model = _CovModel(params, domain)
    v = float(model.signal(np.array([i1]), np.array([i2]))[0])
    if i1 == i2:
        v += float(params.gamma2[i1])
    return v


def _cholesky(C: np.ndarray):
    """Lower Cholesky factor; a small diagonal jitter is tried only if needed."""
    try:
        return scipy.linalg.cho_factor(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    base = float(np.mean(np.diag(C)))
    if not np.isfinite(base) or base <= 0:
        raise NotPositiveDefinite("covariance matrix has a nonpositive diagonal")
    for rel in (1e-10, 1e-8, 1e-6):
        try:
            return scipy.linalg.cho_factor(C + rel * base * np.eye(C.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite("covariance matrix is not positive definite")


# ---------------------------------------------------------------------------
# Vecchia approximation


def maxmin_ordering(points: np.ndarray) -> np.ndarray:
    """Greedy max-min distance ordering, starting from the point nearest the centroid."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    first = int(np.argmin(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    order = np.empty(n, dtype=int)
    order[0] = first
    mind = np.sum((pts - pts[first]) ** 2, axis=1)
    mind[first] = -1.0
    for t in range(1, n):
        nxt = int(np.argmax(mind))
        order[t] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
        mind[order[: t + 1]] = -1.0
    return order


def nearest_previous_neighbors(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """``nbrs[i]``: up to ``k`` nearest among rows ``0..i-1`` (padded with -1), nearest first."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    nbrs = np.full((n, k), -1, dtype=int)
    for lo in range(1, n, chunk):
        hi = min(n, lo + chunk)
        D = np.sum((pts[lo:hi, None, :] - pts[None, :hi, :]) ** 2, axis=2)
        rows = np.arange(lo, hi)
        D[np.arange(hi)[None, :] >= rows[:, None]] = np.inf
        kk = min(k, hi - 1)
        part = np.argpartition(D, kk - 1, axis=1)[:, :kk] if kk < hi else np.argsort(D, axis=1)[:, :kk]
        dsel = np.take_along_axis(D, part, axis=1)
        srt = np.lexsort((part, dsel), axis=1)
        part = np.take_along_axis(part, srt, axis=1)
        dsel = np.take_along_axis(dsel, srt, axis=1)
        part[~np.isfinite(dsel)] = -1
        nbrs[lo:hi, :kk] = part
    return nbrs


@dataclass(frozen=True, eq=False)
class VecchiaFactor:
    """``L`` lower triangular in the permuted order, with ``C^{-1} ~= L^T L``."""

    order: np.ndarray
    neighbors: np.ndarray  # in permuted indices
    L: sp.csr_matrix

    def precision(self) -> np.ndarray:
        """Implied dense precision in the original location order."""
        P = (self.L.T @ self.L).toarray()
        inv = np.argsort(self.order)
        return P[np.ix_(inv, inv)]

    def whiten(self, Zq: np.ndarray) -> np.ndarray:
        return self.L @ np.asarray(Zq)[self.order]

    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(self.L.diagonal())))


def vecchia_structure(domain: SpatialDomain, num_neighbors: int, ordering: Optional[np.ndarray] = None):
    if num_neighbors < 1:
        raise ValueError("num_neighbors must be >= 1")
    emb = domain.embedding()
    order = maxmin_ordering(emb) if ordering is None else np.asarray(ordering)
    return order, nearest_previous_neighbors(emb[order], num_neighbors)


def vecchia_factor(params: CovParams, domain: SpatialDomain, num_neighbors: int = 8,
                   ordering: Optional[np.ndarray] = None, structure=None) -> VecchiaFactor:
    """Sparse inverse-Cholesky factor from nearest-previous-neighbour conditioning."""
    order, nbrs = structure if structure is not None else vecchia_structure(domain, num_neighbors, ordering)
    n, k = nbrs.shape
    model = _CovModel(params, domain)
    valid = nbrs >= 0
    nb_orig = np.where(valid, order[np.where(valid, nbrs, 0)], 0)
    own = order
    C_nn = model.signal(nb_orig[:, :, None], nb_orig[:, None, :])
    C_nn = C_nn + np.where(valid, params.gamma2[nb_orig], 0.0)[:, :, None] * np.eye(k)[None]
    pad = ~(valid[:, :, None] & valid[:, None, :])
    C_nn = np.where(pad, np.eye(k)[None], C_nn)
    C_ni = np.where(valid, model.signal(nb_orig, own[:, None]), 0.0)
    c_ii = params.sigma2[own] + params.gamma2[own]
    try:
        Lnn = np.linalg.cholesky(C_nn)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("neighbour covariance block is not positive definite") from None
    y = np.linalg.solve(Lnn, C_ni[..., None])
    b = np.linalg.solve(np.swapaxes(Lnn, 1, 2), y)[..., 0]
    cond = c_ii - np.einsum("ij,ij->i", C_ni, b)
    if np.any(cond <= 0):
        raise NotPositiveDefinite("a conditional variance is not positive")
    root = np.sqrt(cond)
    rows = np.concatenate([np.arange(n), np.repeat(np.arange(n), k)[valid.ravel()]])
    cols = np.concatenate([np.arange(n), nbrs[valid]])
    vals = np.concatenate([1.0 / root, (-b / root[:, None])[valid]])
    L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return VecchiaFactor(order, nbrs, L)


# ---------------------------------------------------------------------------
# likelihood, fitting, prediction


def gaussian_loglik(Zq: np.ndarray, params: CovParams, domain: SpatialDomain, method: str = "exact",
                    num_neighbors: int = 8, structure=None) -> float:
    """Gaussian log-likelihood of ``Zq`` (``(n, N)``, years independent).

    The exact path factorizes ``C`` once and reuses it for every year.
    """
    Zq = np.asarray(Zq, dtype=float)
    if Zq.ndim == 1:
        Zq = Zq[:, None]
    n, N = Zq.shape
    if method == "exact":
        cf = _cholesky(cov_matrix(params, domain))
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        w = scipy.linalg.solve_triangular(cf[0], Zq, lower=True, check_finite=False)
        return -0.5 * (N * logdet + float(np.sum(w * w)) + n * N * LOG_2PI)
    if method == "vecchia":
        f = vecchia_factor(params, domain, num_neighbors, structure=structure)
        e = f.whiten(Zq)
        return -0.5 * (float(np.sum(e * e)) - N * f.log_det_precision() + n * N * LOG_2PI)
    raise ValueError(f"unknown likelihood method {method!r}")


@dataclass(frozen=True, eq=False)
class MLEResult:
    params: CovParams
    loglik: float
    converged: bool
    n_evals: int


@dataclass(frozen=True, eq=False)
class SpatialCovFit:
    fits: list  # MLEResult per component
    method: str = "exact"
    num_neighbors: Optional[int] = None
    ordering: Optional[np.ndarray] = None

    @property
    def params(self) -> list:
        return [f.params for f in self.fits]


def initial_params(kind: str, domain: SpatialDomain, sigma2, gamma2) -> CovParams:
    """Scale-aware start: range = median pairwise distance, nu = 1/2."""
    emb = domain.embedding()
    if domain.n > 1:
        idx = np.arange(domain.n)
        if domain.n > 2000:
            idx = np.linspace(0, domain.n - 1, 2000).astype(int)
        D = pairwise_distances(domain, idx, idx)
        alpha0 = float(np.median(D[np.triu_indices(idx.size, 1)]))
    else:
        alpha0 = 1.0
    alpha0 = alpha0 if alpha0 > 0 else 1.0
    if kind == "matern":
        return CovParams("matern", sigma2, gamma2, nu=0.5, alpha=alpha0)
    beta = np.zeros((2, 4))
    beta[:, 0] = np.log(alpha0)
    return CovParams("aniso", sigma2, gamma2, nu=0.5, kappa=0.0, beta=beta)


def _pack(p: CovParams) -> np.ndarray:
    if p.kind == "matern":
        return np.array([np.log(p.alpha), np.log(p.nu)])
    return np.concatenate([[np.log(p.nu), p.kappa], p.beta.ravel()])


def _unpack(x: np.ndarray, template: CovParams) -> CovParams:
    nu = float(np.clip(np.exp(x[-1] if template.kind == "matern" else x[0]), *NU_BOUNDS))
    if template.kind == "matern":
        return replace(template, alpha=float(np.exp(np.clip(x[0], -700, 700))), nu=nu)
    return replace(template, nu=nu, kappa=float(x[1]), beta=np.asarray(x[2:]).reshape(2, 4))


def fit_mle(Zq: np.ndarray, domain: SpatialDomain, sigma2, gamma2, kind: str = "matern",
            init: Optional[CovParams] = None, method: str = "exact", num_neighbors: int = 8,
            maxiter: int = 500, rtol: float = 1e-6) -> MLEResult:
    """Nelder-Mead maximum likelihood over log-range / log-smoothness (and anisotropy).

    The variance fields are held fixed.  The returned point never has a
    lower likelihood than ``init``; hitting ``maxiter`` returns the best
    point so far with ``converged=False`` and a warning.
    """
    if domain.n < 2:
        raise ValueError("at least 2 locations are needed to fit a spatial covariance")
    Zq = np.asarray(Zq, dtype=float)
    start = init if init is not None else initial_params(kind, domain, sigma2, gamma2)
    start = replace(start, sigma2=np.asarray(sigma2, float), gamma2=np.asarray(gamma2, float))
    structure = vecchia_structure(domain, num_neighbors) if method == "vecchia" else None
    D = pairwise_distances(domain) if (method == "exact" and start.kind == "matern") else None
    n, N = Zq.shape
    sd = np.sqrt(start.sigma2)
    S_outer = np.outer(sd, sd) if D is not None else None
    diag = np.diag_indices(n)

    if D is not None:
        # correlations depend on distance only; gridded designs repeat few distinct values
        D_unique, D_index = np.unique(D, return_inverse=True)
        D_index = D_index.reshape(D.shape)

    def loglik(p: CovParams) -> float:
        if D is None:
            return gaussian_loglik(Zq, p, domain, method, num_neighbors, structure)
        C = S_outer * matern_corr(D_unique, p.alpha, p.nu)[D_index]
        C[diag] += p.gamma2
        cf = _cholesky(C)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        w = scipy.linalg.solve_triangular(cf[0], Zq, lower=True, check_finite=False)
        return -0.5 * (N * logdet + float(np.sum(w * w)) + n * N * LOG_2PI)

    best = {"x": _pack(start), "ll": -np.inf}
    evals = 0

    def objective(x):
        nonlocal evals
        evals += 1
        try:
            ll = loglik(_unpack(x, start))
        except (NotPositiveDefinite, SingularAnisotropy, FloatingPointError):
            return 1e300
        if not np.isfinite(ll):
            return 1e300
        if ll > best["ll"]:
            best["x"], best["ll"] = np.array(x, dtype=float), ll
        return -ll

    f0 = objective(_pack(start))
    x_start = best["x"].copy()
    scale = max(abs(f0), 1.0) if f0 < 1e300 else 1.0
    res = scipy.optimize.minimize(objective, x_start, method="Nelder-Mead",
                                  options={"maxiter": maxiter, "xatol": rtol, "fatol": rtol * scale,
                                           "adaptive": x_start.size > 4})
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"likelihood optimization stopped after {res.nit} iterations", MaxIterationsWarning,
                      stacklevel=2)
    if not np.isfinite(best["ll"]):
        raise NotPositiveDefinite("no evaluated parameter gave a positive-definite covariance")
    return MLEResult(_unpack(best["x"], start), float(best["ll"]), converged, evals)


def krige_scores(Zq: np.ndarray, params: CovParams, domain: SpatialDomain, method: str = "exact",
                 num_neighbors: int = 8, structure=None) -> np.ndarray:
    """Conditional mean of the smooth field given the observed scores.

    ``E[Z_smooth | Z] = (C - Gamma) C^{-1} Z = Z - Gamma C^{-1} Z``; one
    factorization serves every year.  The Vecchia path uses the sparse
    precision ``L^T L`` in place of ``C^{-1}``.
    """
    Zq = np.asarray(Zq, dtype=float)
    squeeze = Zq.ndim == 1
    Z2 = Zq[:, None] if squeeze else Zq
    if method == "exact":
        cf = _cholesky(cov_matrix(params, domain))
        CinvZ = scipy.linalg.cho_solve(cf, Z2, check_finite=False)
    elif method == "vecchia":
        f = vecchia_factor(params, domain, num_neighbors, structure=structure)
        tmp = f.L.T @ (f.L @ Z2[f.order])
        CinvZ = np.empty_like(tmp)
        CinvZ[f.order] = tmp
    else:
        raise ValueError(f"unknown kriging method {method!r}")
    out = Z2 - params.gamma2[:, None] * CinvZ
    return out[:, 0] if squeeze else out


def predict_data(mean, phi: np.ndarray, Zhat: np.ndarray) -> np.ndarray:
    """``Y_hat = mu_hat + 1(change) delta_hat + sum_q Zhat_q phi_q`` on the data grids."""
    N = Zhat.shape[1]
    return mean.surface(N) + Zhat @ phi.T
