"""CUSUM-type changepoint statistics, Monte-Carlo null laws, p-values and reports.

Statistic functions accept leading batch dimensions, so the same call
handles a single location (``Z`` of shape ``(N, Q)``) or all of them
(``(n, N, Q)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal, Optional

import numpy as np

from .core import FunctionalDataset, GeoFTSError


class NonPositiveVariance(GeoFTSError):
    pass


class HypothesisMismatch(GeoFTSError):
    pass


# ---------------------------------------------------------------------------
# statistics


def centered_cusum(Z: np.ndarray) -> np.ndarray:
    """``D[t] = sum_{k<=t} Z_k - (t/N) sum_k Z_k`` for ``t = 0..N`` along axis -2."""
    Z = np.asarray(Z, dtype=float)
    N = Z.shape[-2]
    S = np.cumsum(Z, axis=-2)
    t = np.arange(1, N + 1)[:, None] / N
    D = S - t * S[..., -1:, :]
    zero = np.zeros(Z.shape[:-2] + (1, Z.shape[-1]))
    return np.concatenate([zero, D], axis=-2)


def _check_lam(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise NonPositiveVariance("component variances must be positive")
    return lam


def score_statistic(Z, lam):
    """Normalized sum of squared score CUSUMs and the argmax change time.

    ``T = N^-2 sum_q lam_q^-1 sum_{t=1}^N D_qt^2``; ``tau_hat`` maximizes
    ``sum_q lam_q^-1 D_qt^2`` over ``t = 1..N-1`` (smallest ``t`` on ties).
    """
    Z = np.asarray(Z, dtype=float)
    N = Z.shape[-2]
    if N < 2:
        raise ValueError("need at least two years")
    lam = _check_lam(lam)
    D = centered_cusum(Z)[..., 1:, :]
    prof = np.sum(D**2 / lam[..., None, :], axis=-1)  # (..., N)
    T = prof.sum(axis=-1) / N**2
    tau = np.argmax(prof[..., : N - 1], axis=-1) + 1
    return T, tau


def epidemic_statistic(Z, lam):
    """Epidemic (two-change) score statistic and the maximizing segment ``(t1, t2]``.

    ``T = N^-3 sum_q lam_q^-1 sum_{1<=t1<t2<=N} (D_q,t2 - D_q,t1)^2``, where
    ``D_t2 - D_t1`` is the centred sum over years ``t1+1..t2``.
    """
    Z = np.asarray(Z, dtype=float)
    N = Z.shape[-2]
    if N < 3:
        raise ValueError("need at least three years")
    lam = _check_lam(lam)
    D = centered_cusum(Z)[..., 1:, :] / np.sqrt(lam)[..., None, :]  # t = 1..N
    diff = D[..., None, :, :] - D[..., :, None, :]  # [t1, t2]
    inner = np.sum(diff**2, axis=-1)
    upper = np.triu(np.ones((N, N), dtype=bool), 1)
    inner = np.where(upper, inner, -1.0)
    T = np.sum(np.where(upper, inner, 0.0), axis=(-2, -1)) / N**3
    flat = np.argmax(inner.reshape(inner.shape[:-2] + (N * N,)), axis=-1)
    tau1, tau2 = np.divmod(flat, N)
    return T, tau1 + 1, tau2 + 1


def ff_statistic(Y):
    """Fully-functional CUSUM: ``T = max_t ||S_t||^2`` with the discrete norm in ``u``.

    ``S_t(u) = N^{-1/2} (sum_{k<=t} Y_k(u) - (t/N) sum_k Y_k(u))``.  Returns
    ``(T, tau_hat, profile)`` where ``profile[t] = ||S_t||^2`` for ``t = 0..N``
    and ``tau_hat`` is restricted to ``1..N-1``.
    """
    Y = np.asarray(Y, dtype=float)
    N = Y.shape[-2]
    if N < 2:
        raise ValueError("need at least two years")
    S = centered_cusum(Y) / np.sqrt(N)
    prof = np.mean(S**2, axis=-1)
    T = prof.max(axis=-1)
    tau = np.argmax(prof[..., 1:N], axis=-1) + 1
    return T, tau, prof


# ---------------------------------------------------------------------------
# null distributions


_CHUNK = 5000


def _bridge_block(G: int, rows: int, seed: int, q: int, chunk: int) -> np.ndarray:
    """Brownian bridges at ``x = 1/G, ..., 1``: cumulated Gaussian increments minus ``x W(1)``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(q, chunk))))
    W = np.cumsum(rng.standard_normal((rows, G)), axis=1) / np.sqrt(G)
    x = np.arange(1, G + 1) / G
    return W - x * W[:, -1:]


@lru_cache(maxsize=32)
def _bridge_integrals(R: int, G: int, seed: int, q: int):
    """Riemann sums of ``B^2`` and ``B`` for bridge family ``q``."""
    sq = np.empty(R)
    lin = np.empty(R)
    for c, lo in enumerate(range(0, R, _CHUNK)):
        B = _bridge_block(G, min(_CHUNK, R - lo), seed, q, c)
        sq[lo: lo + B.shape[0]] = np.mean(B * B, axis=1)
        lin[lo: lo + B.shape[0]] = np.mean(B, axis=1)
    sq.setflags(write=False)
    lin.setflags(write=False)
    return sq, lin


@lru_cache(maxsize=16)
def _bridge_paths_sq(R: int, G: int, seed: int, q: int) -> np.ndarray:
    out = np.empty((R, G))
    for c, lo in enumerate(range(0, R, _CHUNK)):
        B = _bridge_block(G, min(_CHUNK, R - lo), seed, q, c)
        out[lo: lo + B.shape[0]] = B * B
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class NullSettings:
    replicates: int = 100_000
    grid_size: int = 1000
    seed: int = 20230607
    ff_replicates: int = 10_000
    ff_grid_size: int = 200

    def __post_init__(self):
        if self.replicates < 10_000 or self.ff_replicates < 10_000:
            raise ValueError("null distributions need at least 10000 replicates")
        if self.grid_size < 200 or self.ff_grid_size < 200:
            raise ValueError("bridge grids need at least 200 points")


@dataclass(frozen=True, eq=False)
class NullDistribution:
    kind: Literal["score", "ff", "epidemic"]
    sample: np.ndarray  # sorted ascending
    replicates: int
    grid_size: int
    seed: int
    Q: int
    weights: Optional[tuple] = None


def _raw_null(kind: str, Q: int, weights, R: int, G: int, seed: int) -> np.ndarray:
    if kind == "score":
        return np.sum([_bridge_integrals(R, G, seed, q)[0] for q in range(Q)], axis=0) if Q else np.zeros(R)
    if kind == "epidemic":
        # int int_{x<y} (B(x) - B(y))^2 = int B^2 - (int B)^2
        parts = [s - l * l for s, l in (_bridge_integrals(R, G, seed, q) for q in range(Q))]
        return np.sum(parts, axis=0) if Q else np.zeros(R)
    if kind == "ff":
        w = np.asarray(weights, dtype=float)
        acc = np.zeros((R, G))
        for q, wq in enumerate(w):
            if wq != 0:
                acc += wq * _bridge_paths_sq(R, G, seed, q)
        return acc.max(axis=1)
    raise ValueError(f"unknown null kind {kind!r}")


def simulate_null(kind: str, Q: Optional[int] = None, weights=None, replicates: int = 100_000,
                  grid_size: int = 1000, seed: int = NullSettings.seed) -> NullDistribution:
    """Monte-Carlo sample of a limiting null law built from independent Brownian bridges.

    ``score``: ``sum_q int B_q^2``; ``epidemic``: ``sum_q int int_{x<y} (B_q(x) - B_q(y))^2``;
    ``ff``: ``sup_x sum_q w_q B_q(x)^2``.  Bridge ``q`` is drawn from the same
    stream for every kind, so samples are pathwise coupled.
    """
    if replicates < 10_000:
        raise ValueError("replicates must be >= 10000")
    if grid_size < 200:
        raise ValueError("grid_size must be >= 200")
    if kind == "ff":
        if weights is None:
            raise ValueError("ff null needs weights")
        Q = len(weights)
        weights = tuple(float(w) for w in weights)
    elif Q is None or Q < 0:
        raise ValueError("Q must be a nonnegative integer")
    sample = np.sort(_raw_null(kind, Q, weights, replicates, grid_size, seed))
    sample.setflags(write=False)
    return NullDistribution(kind, sample, replicates, grid_size, seed, int(Q), weights)


def p_value(stat, null: NullDistribution):
    """``(1 + #{sample >= stat}) / (R + 1)``."""
    s = null.sample
    if s.size == 0:
        raise ValueError("empty null sample")
    stat = np.asarray(stat, dtype=float)
    exceed = s.size - np.searchsorted(s, stat, side="left")
    return (1.0 + exceed) / (s.size + 1.0)


def adjust_pvalues(p, method: Literal["bh", "bonferroni"]) -> np.ndarray:
    """Bonferroni ``min(n p, 1)`` or Benjamini-Hochberg step-up adjusted p-values."""
    p = np.asarray(p, dtype=float)
    n = p.size
    if method == "bonferroni":
        return np.minimum(n * p, 1.0)
    if method != "bh":
        raise ValueError(f"unknown adjustment {method!r}")
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(n)
    out[order] = np.minimum(ranked, 1.0)
    return out


def change_magnitude(delta, u_grid) -> np.ndarray:
    """u-average of the change surface by the trapezoid rule; ``delta`` is a MeanModel or ``(n, m)``."""
    d = delta.delta if hasattr(delta, "delta") else np.asarray(delta, dtype=float)
    return np.trapezoid(d, np.asarray(u_grid), axis=-1)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True, eq=False)
class ChangepointReport:
    family: str
    flavor: str
    model: str
    statistic: np.ndarray
    p_raw: np.ndarray
    p_bh: np.ndarray
    p_bonf: np.ndarray
    delta_hat: np.ndarray
    tau: Optional[np.ndarray] = None
    tau1: Optional[np.ndarray] = None
    tau2: Optional[np.ndarray] = None
    active_components: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.statistic.size

    def rejections(self, alpha: float = 0.05, adjust: Optional[str] = None) -> np.ndarray:
        p = {None: self.p_raw, "none": self.p_raw, "bh": self.p_bh, "bonferroni": self.p_bonf}[adjust]
        return p < alpha

    def estimated_tau(self) -> np.ndarray:
        return self.tau if self.model == "amoc" else np.column_stack([self.tau1, self.tau2])


def _active(lam: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    scale = np.max(lam, axis=-1, keepdims=True)
    return (lam > rel * scale) & (scale > 0)


def _masked_lambda(lam):
    """Replace numerically-zero variances by 1 and return the activity mask.

    Inactive components are zeroed in the scores by the caller so they add
    nothing to the statistic.
    """
    act = _active(np.asarray(lam, dtype=float))
    return np.where(act, lam, 1.0), act


def _pvalues_by_active(T, n_active, kind, nulls: NullSettings):
    p = np.ones_like(T, dtype=float)
    for q in np.unique(n_active):
        if q == 0:
            continue
        sel = n_active == q
        null = simulate_null(kind, int(q), replicates=nulls.replicates, grid_size=nulls.grid_size, seed=nulls.seed)
        p[sel] = p_value(T[sel], null)
    return p


def _empirical_delta(values, mask, u_grid):
    out = ~mask
    n_in = np.maximum(mask.sum(axis=1), 1)
    n_out = np.maximum(out.sum(axis=1), 1)
    d = np.einsum("ik,ikj->ij", mask, values) / n_in[:, None] - np.einsum("ik,ikj->ij", out, values) / n_out[:, None]
    return change_magnitude(d, u_grid)


def _score_family_report(Z, lam, ds, model, flavor, nulls, family="score", delta_hat=None):
    lam_safe, act = _masked_lambda(lam)
    Zm = np.where(act[:, None, :], Z, 0.0)
    n_active = act.sum(axis=1)
    N = Z.shape[1]
    k = np.arange(1, N + 1)
    if model == "amoc":
        T, tau = score_statistic(Zm, lam_safe)
        p = _pvalues_by_active(T, n_active, "score", nulls)
        mask = k[None, :] > tau[:, None]
        extra = {"tau": tau}
    elif model == "epidemic":
        T = np.empty(Z.shape[0])
        t1 = np.empty(Z.shape[0], int)
        t2 = np.empty(Z.shape[0], int)
        for lo in range(0, Z.shape[0], 256):
            sl = slice(lo, lo + 256)
            T[sl], t1[sl], t2[sl] = epidemic_statistic(Zm[sl], lam_safe[sl])
        p = _pvalues_by_active(T, n_active, "epidemic", nulls)
        mask = (k[None, :] > t1[:, None]) & (k[None, :] <= t2[:, None])
        extra = {"tau1": t1, "tau2": t2}
    else:
        raise ValueError(f"unknown model {model!r}")
    if delta_hat is None:
        delta_hat = _empirical_delta(ds.values, mask, ds.u_grid)
    return ChangepointReport(family, flavor, model, T, p, adjust_pvalues(p, "bh"), adjust_pvalues(p, "bonferroni"),
                             np.asarray(delta_hat), active_components=n_active, **extra)


def local_fpca(values: np.ndarray, Q: int):
    """Per-location FPCA: centred scores ``(n, N, Q)`` and their variances ``(n, Q)``.

    Only the data at each location is used; the mean is the within-location
    average over years.
    """
    n, N, m = values.shape
    resid = values - values.mean(axis=1, keepdims=True)
    U, s, Vt = np.linalg.svd(resid, full_matrices=False)
    r = s.shape[-1]
    q = min(Q, r)
    scores = np.zeros((n, N, Q))
    lam = np.zeros((n, Q))
    # score = resid @ (sqrt(m) v) / m = U s / sqrt(m)
    scores[:, :, :q] = U[:, :, :q] * s[:, None, :q] / np.sqrt(m)
    lam[:, :q] = s[:, :q] ** 2 / (N * m)
    return scores, lam


def segment_residual_eigenvalues(values: np.ndarray, tau: np.ndarray, Q: int) -> np.ndarray:
    """Top ``Q`` covariance eigenvalues after removing the two segment means split at ``tau``."""
    n, N, m = values.shape
    k = np.arange(1, N + 1)
    post = k[None, :] > tau[:, None]
    resid = values.copy()
    for seg in (post, ~post):
        cnt = np.maximum(seg.sum(axis=1), 1)
        mu = np.einsum("ik,ikj->ij", seg, values) / cnt[:, None]
        resid -= seg[:, :, None] * mu[:, None, :]
    s = np.linalg.svd(resid, compute_uv=False)
    lam = np.zeros((n, Q))
    q = min(Q, s.shape[-1])
    lam[:, :q] = s[:, :q] ** 2 / (N * m)
    return lam


def _ff_report(ds, Q, flavor, nulls, delta_hat=None):
    T, tau, _ = ff_statistic(ds.values)
    w = segment_residual_eigenvalues(ds.values, tau, Q)
    R, G = nulls.ff_replicates, nulls.ff_grid_size
    paths = [_bridge_paths_sq(R, G, nulls.seed, q) for q in range(Q)]
    p = np.empty(ds.n)
    for i in range(ds.n):
        acc = np.zeros((R, G))
        for q in range(Q):
            if w[i, q] > 0:
                acc += w[i, q] * paths[q]
        sample = acc.max(axis=1)
        p[i] = (1.0 + np.count_nonzero(sample >= T[i])) / (R + 1.0)
    if delta_hat is None:
        k = np.arange(1, ds.N + 1)
        delta_hat = _empirical_delta(ds.values, k[None, :] > tau[:, None], ds.u_grid)
    return ChangepointReport("ff", flavor, "amoc", T, p, adjust_pvalues(p, "bh"), adjust_pvalues(p, "bonferroni"),
                             np.asarray(delta_hat), tau=tau, active_components=(w > 0).sum(axis=1))


def individual_reports(ds: FunctionalDataset, Q: int, model: str = "amoc", family: str = "score",
                       nulls: Optional[NullSettings] = None, flavor: str = "individual",
                       delta_hat=None) -> ChangepointReport:
    """Statistics computed from each location's own data only."""
    nulls = nulls or NullSettings()
    if family == "ff":
        if model != "amoc":
            raise ValueError("the fully-functional statistic is defined for the AMOC model only")
        return _ff_report(ds, Q, flavor, nulls, delta_hat)
    if family != "score":
        raise ValueError(f"unknown statistic family {family!r}")
    scores, lam = local_fpca(ds.values, Q)
    return _score_family_report(scores, lam, ds, model, flavor, nulls, delta_hat=delta_hat)


def predicted_reports(ds: FunctionalDataset, fit, flavor: str = "primary", family: str = "score",
                      model: str = "amoc", nulls: Optional[NullSettings] = None,
                      delta_hat=None) -> ChangepointReport:
    """Statistics built from spatially predicted scores or data.

    ``fit`` is a :class:`geoftscp.pipeline.SpatialPrediction`.  Score flavors:
    ``primary`` uses the local variance of the predicted scores,
    ``unadjusted`` the local variance of the original scores, ``recomputed``
    reruns the per-location machinery on the predicted data.  The ``ff``
    family always reruns on the predicted data.
    """
    nulls = nulls or NullSettings()
    Q = fit.Q
    if family == "ff":
        return individual_reports(ds.with_values(fit.yhat), Q, "amoc", "ff", nulls, flavor="predicted",
                                  delta_hat=delta_hat)
    if family != "score":
        raise ValueError(f"unknown statistic family {family!r}")
    if not fit.is_null:
        raise HypothesisMismatch("score-based predicted statistics need predictions built under the null")
    if flavor == "recomputed":
        return individual_reports(ds.with_values(fit.yhat), Q, model, "score", nulls, flavor="recomputed",
                                  delta_hat=delta_hat)
    if flavor == "primary":
        lam = fit.lambda_star
    elif flavor == "unadjusted":
        lam = fit.pca.lambda_hat
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    return _score_family_report(fit.zhat, lam, ds, model, flavor, nulls, delta_hat=delta_hat)
