"""End-to-end spatial prediction: mean fit, FPCA, per-component likelihood fits, kriging.

The output bundles everything the predicted test statistics need: kriged
scores, the predicted data surface and the local variances of both the
original and predicted scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import MeanModel, estimate_mean_and_change
from .core import ChangeConfig, FunctionalDataset
from .fpca import KernelSpec, PCDecomposition, fit_pca, kernel_weights, local_variance
from .spatial import MLEResult, SpatialCovFit, fit_mle, initial_params, krige_scores, predict_data


class DegenerateSpatialFit(UserWarning):
    """Spatial fitting was skipped (a single location or a zero-variance component)."""


@dataclass(frozen=True)
class PipelineConfig:
    Q: int = 4
    kind: str = "matern"
    method: str = "exact"
    num_neighbors: int = 8
    bandwidth: Optional[float] = None
    smooth_covariance: bool = False
    zeta: Optional[float] = None
    maxiter: int = 500


@dataclass(frozen=True, eq=False)
class SpatialPrediction:
    mean: MeanModel
    pca: PCDecomposition
    cov: SpatialCovFit
    zhat: np.ndarray  # (n, N, Q)
    yhat: np.ndarray  # (n, N, m)
    lambda_star: np.ndarray  # (n, Q)

    @property
    def Q(self) -> int:
        return self.pca.Q

    @property
    def is_null(self) -> bool:
        return self.mean.config.is_null


def fit_spatial_prediction(ds: FunctionalDataset, config: PipelineConfig = PipelineConfig(),
                           change: Optional[ChangeConfig] = None) -> SpatialPrediction:
    """Run mean estimation, FPCA, maximum likelihood and kriging under ``change``.

    ``change=None`` fits under the global null.  Components whose smooth
    variance estimate is identically zero are predicted as zero without a
    likelihood fit; a single-location dataset is kriged with the plug-in
    variances (``Z_hat = sigma^2 / (sigma^2 + gamma^2) Z``).
    """
    change = change or ChangeConfig()
    mean = estimate_mean_and_change(ds, change, zeta=config.zeta)
    pca = fit_pca(ds, mean, config.Q, bandwidth=config.bandwidth, smooth=config.smooth_covariance)
    kernel = KernelSpec(pca.bandwidth)
    W = kernel_weights(ds.domain, kernel)

    zhat = np.zeros_like(pca.scores)
    fits = []
    for q in range(config.Q):
        Zq = pca.scores[:, :, q]
        sig, gam = pca.sigma2_hat[:, q], pca.gamma2_hat[:, q]
        if not np.any(sig > 0) or not np.all(sig + gam > 0):
            warnings.warn(f"component {q + 1}: no spatially coherent variance, predicted scores set to 0",
                          DegenerateSpatialFit, stacklevel=2)
            fits.append(MLEResult(initial_params(config.kind, ds.domain, sig, gam), float("nan"), False, 0))
            continue
        if ds.n < 2:
            warnings.warn("single location: kriging reduces to nugget shrinkage", DegenerateSpatialFit, stacklevel=2)
            params = initial_params(config.kind, ds.domain, sig, gam)
            fits.append(MLEResult(params, float("nan"), False, 0))
        else:
            fit = fit_mle(Zq, ds.domain, sig, gam, kind=config.kind, method=config.method,
                          num_neighbors=config.num_neighbors, maxiter=config.maxiter)
            fits.append(fit)
            params = fit.params
        zhat[:, :, q] = krige_scores(Zq, params, ds.domain, config.method, config.num_neighbors)

    lam_star = np.column_stack([local_variance(zhat[:, :, q], ds.domain, kernel, W) for q in range(config.Q)])
    yhat = predict_data(mean, pca.phi, zhat)
    cov = SpatialCovFit(fits, config.method, config.num_neighbors if config.method == "vecchia" else None)
    return SpatialPrediction(mean, pca, cov, zhat, yhat, lam_star)

