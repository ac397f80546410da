"""Functional principal components of the residual field and local-regression variances.

All inner products in ``u`` use the discrete form ``(1/m) sum_j f(u_j) g(u_j)``,
so principal components satisfy ``Phi.T @ Phi / m = I`` and scores live on the
scale of the data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .basis import MeanModel
from .core import FunctionalDataset, SpatialDomain


class RepeatedEigenvalueWarning(UserWarning):
    """Leading eigenvalues are (numerically) tied, so component order is unstable."""


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float
    kind: str = "epanechnikov"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.kind != "epanechnikov":
            raise ValueError(f"unsupported kernel {self.kind!r}")

    def __call__(self, d):
        """``K_h(d) = K(d / h) / h`` with ``K(x) = 0.75 (1 - x^2)_+``."""
        x = np.asarray(d, dtype=float) / self.bandwidth
        return 0.75 * np.clip(1.0 - x * x, 0.0, None) / self.bandwidth


def default_bandwidth(domain: SpatialDomain) -> float:
    return 0.08 if domain.kind == "plane" else 400.0


@dataclass(frozen=True, eq=False)
class PCDecomposition:
    Q: int
    phi: np.ndarray  # (m, Q)
    eigenvalues: np.ndarray  # (Q,)
    scores: np.ndarray  # (n, N, Q)
    lambda_hat: np.ndarray  # (n, Q)
    sigma2_hat: np.ndarray  # (n, Q)
    gamma2_hat: np.ndarray  # (n, Q)
    bandwidth: float
    trace: float  # total variance, trace(C_u) / m


def residuals(ds: FunctionalDataset, mean: MeanModel) -> np.ndarray:
    return ds.values - mean.surface(ds.N)


def marginal_covariance(ds: FunctionalDataset, mean: MeanModel) -> np.ndarray:
    """``C_u = (1/n) sum_i (1/N) sum_k r_ik r_ik^T``."""
    return covariance_of_residuals(residuals(ds, mean))


def covariance_of_residuals(resid: np.ndarray) -> np.ndarray:
    n, N, m = resid.shape
    r = resid.reshape(n * N, m)
    C = r.T @ r / (n * N)
    return 0.5 * (C + C.T)


def smooth_covariance(C: np.ndarray, u_grid: np.ndarray, bandwidths=None):
    """Bivariate product-kernel smooth ``S C S^T`` with the bandwidth chosen by GCV.

    Returns the smoothed matrix and the selected bandwidth.  The smoother is
    a Nadaraya-Watson Epanechnikov smoother in ``u``; its trace enters GCV
    as ``tr(S)^2``.
    """
    m = C.shape[0]
    du = u_grid[1] - u_grid[0] if m > 1 else 1.0
    if bandwidths is None:
        bandwidths = du * np.linspace(1.01, 6.0, 15)
    best = (np.inf, None, C)
    diff = u_grid[:, None] - u_grid[None, :]
    for h in bandwidths:
        K = np.clip(1 - (diff / h) ** 2, 0, None)
        S = K / K.sum(axis=1, keepdims=True)
        Cs = S @ C @ S.T
        tr = np.trace(S) ** 2
        if tr >= m * m:
            continue
        gcv = m * m * np.sum((C - Cs) ** 2) / (m * m - tr) ** 2
        if gcv < best[0]:
            best = (gcv, h, Cs)
    return 0.5 * (best[2] + best[2].T), best[1]


def eigendecompose(C: np.ndarray, Q: int):
    """Top ``Q`` components of ``C`` under the discrete inner product.

    Returns ``(Phi, eigenvalues)`` with ``Phi.T @ Phi / m = I`` and each
    column summing to a nonnegative value.  Eigenvalues are those of the
    integral operator, i.e. of ``C / m``.
    """
    m = C.shape[0]
    if not 1 <= Q < m:
        raise ValueError(f"need 1 <= Q < m, got Q={Q}, m={m}")
    vals, vecs = np.linalg.eigh(C / m)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    lead = vals[: Q + 1]
    if np.any(np.abs(np.diff(lead)) < 1e-10):
        warnings.warn("repeated eigenvalue among the leading components", RepeatedEigenvalueWarning, stacklevel=2)
    phi = np.sqrt(m) * vecs[:, :Q]
    sign = np.where(phi.sum(axis=0) < 0, -1.0, 1.0)
    return phi * sign, vals[:Q].copy()


def extract_scores(resid: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``Z[i, k, q] = (1/m) sum_j phi_q(u_j) r_ik(u_j)``."""
    m = phi.shape[0]
    return resid @ phi / m


def reconstruct(scores: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return scores @ phi.T


# ---------------------------------------------------------------------------
# local regression in space


def kernel_weights(domain: SpatialDomain, kernel: KernelSpec) -> sp.csr_matrix:
    """Sparse ``W[i0, i] = K_h(s_i - s_i0)``; only pairs within the bandwidth are stored."""
    emb = domain.embedding()
    tree = cKDTree(emb)
    dist = tree.sparse_distance_matrix(tree, kernel.bandwidth, output_type="coo_matrix")
    vals = kernel(dist.data)
    W = sp.coo_matrix((vals, (dist.row, dist.col)), shape=(domain.n, domain.n)).tocsr()
    W.eliminate_zeros()
    return W


def local_variance(Zq: np.ndarray, domain: SpatialDomain, kernel: KernelSpec, W=None) -> np.ndarray:
    """Nadaraya-Watson estimate of ``E[Z^2]`` at every location.

    ``Zq`` is ``(n, N)``.  The weighted least-squares problem over ``k``
    reduces to averaging ``mean_k Z^2`` with the kernel weights.
    """
    W = kernel_weights(domain, kernel) if W is None else W
    msq = np.mean(np.asarray(Zq) ** 2, axis=1)
    return np.asarray(W @ msq) / np.asarray(W.sum(axis=1)).ravel()


def local_cross_variance(Zq: np.ndarray, domain: SpatialDomain, kernel: KernelSpec, W=None) -> np.ndarray:
    """Kernel-weighted average of cross-products ``C[i1, i2] = mean_k Z_i1 Z_i2`` over ``i1 != i2``.

    The diagonal is excluded so the estimate targets the spatially
    coherent variance only.  Locations whose window holds no other
    location get 0.  Negative values are floored at 0.
    """
    W = kernel_weights(domain, kernel) if W is None else W
    Zq = np.asarray(Zq)
    N = Zq.shape[1]
    WZ = W @ Zq  # (n, N): sum_i w_i Z_ik
    W2 = W.multiply(W)
    num = np.sum(WZ**2, axis=1) / N - np.asarray(W2 @ np.mean(Zq**2, axis=1)).ravel()
    rowsum = np.asarray(W.sum(axis=1)).ravel()
    den = rowsum**2 - np.asarray(W2.sum(axis=1)).ravel()
    scale = np.maximum(rowsum**2, 1e-300)
    out = np.zeros_like(num)
    ok = den > 1e-12 * scale
    out[ok] = num[ok] / den[ok]
    return np.clip(out, 0.0, None)


def gamma_estimate(lam: np.ndarray, sigma2: np.ndarray, floor: float = 1e-8):
    """``gamma^2 = max(lambda - sigma^2, floor * lambda)``."""
    lam = np.asarray(lam, dtype=float)
    return np.maximum(lam - np.asarray(sigma2, dtype=float), floor * lam)


def fit_pca(ds: FunctionalDataset, mean: MeanModel, Q: int, bandwidth: Optional[float] = None,
            smooth: bool = False) -> PCDecomposition:
    """Marginal covariance, components, scores and the three variance fields."""
    resid = residuals(ds, mean)
    C = covariance_of_residuals(resid)
    if smooth:
        C, _ = smooth_covariance(C, ds.u_grid)
    phi, eig = eigendecompose(C, Q)
    Z = extract_scores(resid, phi)
    h = default_bandwidth(ds.domain) if bandwidth is None else bandwidth
    kernel = KernelSpec(h)
    W = kernel_weights(ds.domain, kernel)
    lam = np.empty((ds.n, Q))
    sig = np.empty((ds.n, Q))
    for q in range(Q):
        lam[:, q] = local_variance(Z[:, :, q], ds.domain, kernel, W)
        sig[:, q] = local_cross_variance(Z[:, :, q], ds.domain, kernel, W)
    sig = np.minimum(sig, lam)
    gam = gamma_estimate(lam, sig)
    return PCDecomposition(Q, phi, eig, Z, lam, sig, gam, h, float(np.trace(C)) / ds.m)
