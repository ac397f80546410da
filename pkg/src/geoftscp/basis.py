"""Tensor-product bases and the Kronecker-structured penalized least-squares fit.

The mean ``mu(s, u)`` and change ``delta(s, u)`` surfaces are represented as
``Psi_s @ Theta @ Psi_u.T`` with a spatial basis ``Psi_s`` (real spherical
harmonics or a planar tensor Legendre basis) and a cubic B-spline basis
``Psi_u``.  Roughness is penalized in ``u`` only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg
from numpy.polynomial import legendre
from scipy.interpolate import BSpline
from scipy.special import sph_harm_y

from .core import ChangeConfig, FunctionalDataset, GeoFTSError, SpatialDomain

DEFAULT_ZETA_GRID = np.logspace(-8, 4, 25)


class PointOutOfRange(GeoFTSError):
    pass


class DomainMismatch(GeoFTSError):
    pass


class SingularSystem(GeoFTSError):
    def __init__(self, message: str, pivot: float):
        super().__init__(f"{message} (smallest pivot {pivot:.3e})")
        self.pivot = pivot


class AllDegenerate(GeoFTSError):
    pass


class EmptySegment(GeoFTSError):
    pass


# ---------------------------------------------------------------------------
# B-splines in u


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    num_basis: int
    degree: int
    knots: np.ndarray
    penalty: np.ndarray  # integrated squared second derivative, (L_u, L_u)


def default_num_bsplines(m: int) -> tuple[int, int]:
    """``(num_basis, degree)`` used when none is given: min(20, m // 2) cubics."""
    if m >= 8:
        return min(20, m // 2), 3
    degree = max(min(3, m - 1), 1)
    return max(m, degree + 1), degree


def bspline_basis(num_basis: int, degree: int = 3) -> BSplineBasis:
    """Open uniform B-spline basis on [0, 1] with its second-derivative penalty."""
    if num_basis < degree + 1:
        raise ValueError(f"need at least {degree + 1} basis functions for degree {degree}")
    interior = np.linspace(0.0, 1.0, num_basis - degree + 1)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return BSplineBasis(num_basis, degree, knots, _second_derivative_penalty(knots, degree, num_basis))


def _second_derivative_penalty(knots, degree, L) -> np.ndarray:
    if degree < 2:
        return np.zeros((L, L))
    d2 = BSpline(knots, np.eye(L), degree).derivative(2)
    # psi'' is piecewise polynomial of degree (degree - 2): Gauss-Legendre is exact
    gx, gw = legendre.leggauss(max(degree - 1, 1))
    breaks = np.unique(knots)
    omega = np.zeros((L, L))
    for a, b in zip(breaks[:-1], breaks[1:]):
        x = 0.5 * (b - a) * gx + 0.5 * (a + b)
        vals = d2(x)
        omega += (vals * (0.5 * (b - a) * gw)[:, None]).T @ vals
    return 0.5 * (omega + omega.T)


def eval_bspline(basis: BSplineBasis, points) -> np.ndarray:
    """Design matrix ``(len(points), L_u)``; rows are a partition of unity."""
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise PointOutOfRange("B-spline points must lie in [0, 1]")
    dm = BSpline.design_matrix(x, basis.knots, basis.degree)
    return dm.toarray()


# ---------------------------------------------------------------------------
# spatial bases


@dataclass(frozen=True)
class SpatialBasis:
    kind: Literal["sphere_harmonics", "tensor_poly"]
    max_degree: int

    @property
    def num_basis(self) -> int:
        return (self.max_degree + 1) ** 2


def default_spatial_basis(domain: SpatialDomain) -> SpatialBasis:
    if domain.kind == "sphere":
        return SpatialBasis("sphere_harmonics", 10)
    return SpatialBasis("tensor_poly", 5)


def real_spherical_harmonics(lon_deg, lat_deg, max_degree: int) -> np.ndarray:
    """Real orthonormal harmonics ordered by (degree, order), order from -l to l."""
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    polar = np.pi / 2 - np.radians(np.asarray(lat_deg, dtype=float))
    cols = []
    for ell in range(max_degree + 1):
        for mm in range(-ell, ell + 1):
            y = sph_harm_y(ell, abs(mm), polar, lon)
            if mm == 0:
                cols.append(y.real)
            elif mm > 0:
                cols.append(np.sqrt(2) * (-1) ** mm * y.real)
            else:
                cols.append(np.sqrt(2) * (-1) ** mm * y.imag)
    return np.column_stack(cols)


def _tensor_legendre(coords: np.ndarray, max_degree: int) -> np.ndarray:
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    span[span == 0] = 1.0
    x = 2 * (coords - lo) / span - 1
    px = legendre.legvander(x[:, 0], max_degree)
    py = legendre.legvander(x[:, 1], max_degree)
    return (px[:, :, None] * py[:, None, :]).reshape(coords.shape[0], -1)


def eval_spatial(basis: SpatialBasis, domain: SpatialDomain) -> np.ndarray:
    """Spatial design matrix ``Psi_s`` of shape ``(n, L_s)``."""
    if basis.kind == "sphere_harmonics":
        if domain.kind != "sphere":
            raise DomainMismatch("spherical harmonics need a longitude/latitude domain")
        return real_spherical_harmonics(domain.coords[:, 0], domain.coords[:, 1], basis.max_degree)
    if basis.kind == "tensor_poly":
        return _tensor_legendre(np.asarray(domain.coords), basis.max_degree)
    raise ValueError(f"unknown spatial basis {basis.kind!r}")


# ---------------------------------------------------------------------------
# penalized least squares


def _spatial_gram(Psi_s, weights):
    if weights is None:
        return Psi_s.T @ Psi_s, Psi_s.T
    w = np.asarray(weights, dtype=float)
    return Psi_s.T @ (w[:, None] * Psi_s), Psi_s.T * w[None, :]


class _KroneckerSystem:
    """Normal equations ``(Gs x Gu + zeta I x Omega) vec(Theta) = vec(B)``.

    ``Gs`` is diagonalized once, after which the system splits into ``L_s``
    independent ``L_u x L_u`` blocks ``d_a Gu + zeta Omega``, each solved by
    Cholesky.  With ``rank_tol`` set, spatial directions whose eigenvalue is
    below ``rank_tol * max(d)`` carry no data and get zero coefficients.
    """

    def __init__(self, Psi_s, Psi_u, Omega, weights=None, rank_tol=None):
        self.Psi_s, self.Psi_u, self.Omega = Psi_s, Psi_u, Omega
        self.Gs, self.PsT_w = _spatial_gram(Psi_s, weights)
        self.Gu = Psi_u.T @ Psi_u
        d, V = np.linalg.eigh(self.Gs)
        dmax = max(d.max(initial=0.0), 0.0)
        d = np.clip(d, 0.0, None)
        self.active = np.ones(d.size, bool) if rank_tol is None else d > rank_tol * dmax
        self.d, self.V = d, V

    def rhs(self, Ybar):
        return self.PsT_w @ Ybar @ self.Psi_u

    def _blocks(self, zeta):
        scale = max(np.abs(np.diag(self.Gu)).max(), 1e-300) * max(self.d.max(initial=0.0), 1.0)
        for a in np.flatnonzero(self.active):
            M = self.d[a] * self.Gu + zeta * self.Omega
            try:
                c, low = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                raise SingularSystem("penalized normal equations are singular",
                                     float(np.linalg.eigvalsh(M).min())) from None
            piv = float(np.min(np.diag(c)) ** 2)
            if piv <= 1e-13 * scale:
                raise SingularSystem("penalized normal equations are singular", piv)
            yield a, (c, low)

    def solve(self, B, zeta):
        Bt = self.V.T @ B
        Tt = np.zeros_like(Bt)
        for a, cf in self._blocks(zeta):
            Tt[a] = scipy.linalg.cho_solve(cf, Bt[a], check_finite=False)
        return self.V @ Tt

    def solve_with_trace(self, B, zeta):
        Bt = self.V.T @ B
        Tt = np.zeros_like(Bt)
        edf = 0.0
        for a, cf in self._blocks(zeta):
            Tt[a] = scipy.linalg.cho_solve(cf, Bt[a], check_finite=False)
            edf += self.d[a] * np.trace(scipy.linalg.cho_solve(cf, self.Gu, check_finite=False))
        return self.V @ Tt, edf


def fit_penalized_surface(Ybar, Psi_s, Psi_u, zeta: float, Omega, weights=None, rank_tol=None) -> np.ndarray:
    """Solve the penalized normal equations for ``Theta`` (``L_s x L_u``).

    The cross-product is formed as ``Psi_s.T @ Ybar @ Psi_u``; the ``nm x
    L_s L_u`` Kronecker design is never built.  ``weights`` are per-location
    row weights (zero drops a location without changing shapes).
    """
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    system = _KroneckerSystem(np.asarray(Psi_s, float), np.asarray(Psi_u, float), np.asarray(Omega, float),
                              weights, rank_tol)
    return system.solve(system.rhs(np.asarray(Ybar, float)), zeta)


def gcv_scores(Ybar, Psi_s, Psi_u, Omega, zeta_grid, weights=None, rank_tol=None) -> np.ndarray:
    """GCV(zeta) = n_eff * RSS / (n_eff - edf)^2 for each grid value (NaN if degenerate)."""
    Ybar = np.asarray(Ybar, float)
    system = _KroneckerSystem(Psi_s, Psi_u, Omega, weights, rank_tol)
    B = system.rhs(Ybar)
    w = np.ones(Ybar.shape[0]) if weights is None else np.asarray(weights, float)
    n_eff = np.count_nonzero(w) * Ybar.shape[1]
    out = np.full(len(zeta_grid), np.nan)
    for g, zeta in enumerate(zeta_grid):
        try:
            theta, edf = system.solve_with_trace(B, zeta)
        except SingularSystem:
            continue
        if edf >= n_eff:
            continue
        resid = Ybar - Psi_s @ theta @ Psi_u.T
        rss = float(np.sum(w[:, None] * resid**2))
        out[g] = n_eff * rss / (n_eff - edf) ** 2
    return out


def select_zeta_gcv(Ybar, Psi_s, Psi_u, Omega, zeta_grid: Sequence[float] = DEFAULT_ZETA_GRID,
                    weights=None, rank_tol=None) -> float:
    """Grid minimizer of GCV; ties go to the larger zeta."""
    grid = np.asarray(zeta_grid, dtype=float)
    if grid.size == 0 or np.any(grid < 0):
        raise ValueError("zeta_grid must be nonempty and nonnegative")
    scores = gcv_scores(Ybar, Psi_s, Psi_u, Omega, grid, weights, rank_tol)
    if np.all(np.isnan(scores)):
        raise AllDegenerate("effective degrees of freedom reach the sample size for every zeta")
    best = np.nanmin(scores)
    tied = np.flatnonzero(scores <= best * (1 + 1e-12))
    return float(grid[tied[np.argmax(grid[tied])]])


# ---------------------------------------------------------------------------
# mean and change surfaces


@dataclass(frozen=True, eq=False)
class MeanModel:
    theta_mu: np.ndarray
    theta_delta: np.ndarray
    spatial: SpatialBasis
    bspline: BSplineBasis
    zeta_mu: float
    zeta_delta: float
    config: ChangeConfig
    Psi_s: np.ndarray
    Psi_u: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        """``mu_hat`` on the dataset grids, ``(n, m)``."""
        return self.Psi_s @ self.theta_mu @ self.Psi_u.T

    @property
    def delta(self) -> np.ndarray:
        return self.Psi_s @ self.theta_delta @ self.Psi_u.T

    def surface(self, N: int) -> np.ndarray:
        """Yearly mean ``mu_hat + 1(k in change set) delta_hat``, ``(n, N, m)``."""
        mask = self.config.change_mask(self.Psi_s.shape[0], N)
        return self.mu[:, None, :] + mask[:, :, None] * self.delta[:, None, :]


def segment_means(values: np.ndarray, mask: np.ndarray):
    """Means over the pre/outside set and over the change set, plus change-set sizes."""
    out = ~mask
    n_out = out.sum(axis=1)
    n_in = mask.sum(axis=1)
    if np.any(n_out == 0):
        raise EmptySegment(f"location {int(np.flatnonzero(n_out == 0)[0])} has no pre-change years")
    ybar_out = np.einsum("ik,ikj->ij", out, values) / n_out[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar_in = np.einsum("ik,ikj->ij", mask, values) / n_in[:, None]
    ybar_in[n_in == 0] = 0.0
    return ybar_out, ybar_in, n_in


def estimate_mean_and_change(ds: FunctionalDataset, cfg: Optional[ChangeConfig] = None,
                             spatial: Optional[SpatialBasis] = None,
                             bspline: Optional[BSplineBasis] = None,
                             zeta: Optional[float] = None,
                             zeta_grid: Sequence[float] = DEFAULT_ZETA_GRID) -> MeanModel:
    """Fit ``mu`` and ``delta`` from per-location empirical segment means.

    ``zeta=None`` selects the smoothing parameter by GCV, separately for the
    two surfaces.  Rank-deficient spatial designs (few locations) are handled
    by giving unidentified spatial directions zero coefficients.
    """
    cfg = cfg or ChangeConfig()
    spatial = spatial or default_spatial_basis(ds.domain)
    if bspline is None:
        bspline = bspline_basis(*default_num_bsplines(ds.m))
    if cfg.pilot_tau is not None and cfg.model == "amoc" and np.any(np.asarray(cfg.pilot_tau) < 1):
        raise EmptySegment("AMOC pilot changepoints must be >= 1")
    Psi_s = eval_spatial(spatial, ds.domain)
    Psi_u = eval_bspline(bspline, ds.u_grid)
    Omega = bspline.penalty
    mask = cfg.change_mask(ds.n, ds.N)
    ybar_mu, ybar_in, n_in = segment_means(ds.values, mask)
    rank_tol = 1e-10

    z_mu = zeta if zeta is not None else select_zeta_gcv(ybar_mu, Psi_s, Psi_u, Omega, zeta_grid, rank_tol=rank_tol)
    theta_mu = fit_penalized_surface(ybar_mu, Psi_s, Psi_u, z_mu, Omega, rank_tol=rank_tol)

    w = (n_in > 0).astype(float)
    if not w.any():
        theta_delta = np.zeros_like(theta_mu)
        z_delta = z_mu
    else:
        ybar_delta = np.where(w[:, None] > 0, ybar_in - ybar_mu, 0.0)
        z_delta = zeta if zeta is not None else select_zeta_gcv(
            ybar_delta, Psi_s, Psi_u, Omega, zeta_grid, weights=w, rank_tol=rank_tol)
        theta_delta = fit_penalized_surface(ybar_delta, Psi_s, Psi_u, z_delta, Omega, weights=w, rank_tol=rank_tol)
    return MeanModel(theta_mu, theta_delta, spatial, bspline, float(z_mu), float(z_delta), cfg, Psi_s, Psi_u)
