"""Simulation design on the unit square, replicate execution and error-rate metrics.

Errors for a replicate depend only on ``(seed, rep_index, dependence)``, so
runs at different signal strengths share their noise (common random
numbers) and metrics differ only through the signal.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .changepoint import ChangepointReport, NullSettings, individual_reports, predicted_reports
from .core import FunctionalDataset, RngSpec, SpatialDomain, pairwise_distances, uniform_grid
from .pipeline import PipelineConfig, SpatialPrediction, fit_spatial_prediction

NUGGET_VARIANCE = 0.3
NOISE_VARIANCE = 0.16
RANGES = (0.4, 0.3, 0.6)
METRICS = ("FPR", "FNR", "FDR", "FWER", "RMSE")
_DEPENDENCE_CODE = {"independent": 0, "dependent": 1}

SCORE_FLAVORS = ("individual", "primary", "unadjusted", "recomputed")
FF_FLAVORS = ("individual", "predicted")


@dataclass(frozen=True)
class Detector:
    family: Literal["score", "ff"] = "score"
    flavor: str = "individual"
    Q: int = 4

    def __post_init__(self):
        allowed = SCORE_FLAVORS if self.family == "score" else FF_FLAVORS if self.family == "ff" else None
        if allowed is None:
            raise ValueError(f"unknown statistic family {self.family!r}")
        if self.flavor not in allowed:
            raise ValueError(f"flavor {self.flavor!r} not available for {self.family!r}")
        if self.Q < 1:
            raise ValueError("Q must be positive")

    @property
    def name(self) -> str:
        return f"{self.family}-{self.flavor}-Q{self.Q}"

    @property
    def needs_prediction(self) -> bool:
        return self.flavor != "individual"


@dataclass(frozen=True)
class SimConfig:
    eta: float = 10.0
    dependence: Literal["independent", "dependent"] = "independent"
    replicates: int = 20
    seed: int = 0
    detectors: tuple = (Detector(),)
    alpha: float = 0.05
    N: int = 15
    grid_shape: tuple = (15, 20)
    m: int = 40
    method: str = "exact"
    nulls: NullSettings = field(default_factory=NullSettings)

    def __post_init__(self):
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be a finite nonnegative number")
        if self.dependence not in _DEPENDENCE_CODE:
            raise ValueError(f"unknown dependence {self.dependence!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "detectors", tuple(self.detectors))
        object.__setattr__(self, "grid_shape", tuple(self.grid_shape))


@dataclass(frozen=True, eq=False)
class SimTruth:
    tau: np.ndarray  # (n,), N where there is no change
    change: np.ndarray  # (n,) bool
    mu: np.ndarray  # (n, m)
    delta: np.ndarray  # (n, m), already multiplied by eta

    @property
    def changed(self) -> np.ndarray:
        """Locations whose mean actually shifts: a finite change time and a nonzero change function."""
        return self.change & np.any(self.delta != 0, axis=1)

    @property
    def change_index(self) -> np.ndarray:
        """Last pre-change year under ``1(k > tau)``, i.e. ``floor(tau)``."""
        return np.floor(self.tau).astype(int)


# ---------------------------------------------------------------------------
# generator


def grid_locations(grid_shape=(15, 20)) -> np.ndarray:
    """Cell midpoints of an ``n1 x n2`` grid on the unit square, ``s1`` varying slowest."""
    n1, n2 = grid_shape
    s1 = (np.arange(n1) + 0.5) / n1
    s2 = (np.arange(n2) + 0.5) / n2
    S1, S2 = np.meshgrid(s1, s2, indexing="ij")
    return np.column_stack([S1.ravel(), S2.ravel()])


def eval_truth(s, u, eta: float, N: int = 15):
    """Mean, change function and change time at locations ``s`` (n, 2) and grid ``u`` (m,)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    s1, s2 = s[:, :1], s[:, 1:2]
    mu = np.cos(np.pi * u) * np.exp(2 * (s1 - s2) / (2 * u + 1))
    gap = s[:, 0] - s[:, 1]
    change = gap > -0.3
    taper = np.where(change, gap + 0.3, 0.0)[:, None]
    delta = eta * (u * s1 + u**2 * s2 - u**3 * (s1 + s2)) * taper
    tau = np.where(change, np.ceil(15 + 3 * np.exp(s[:, 0] + s[:, 1])) / 4, float(N))
    return mu, delta, tau


def component_functions(u) -> np.ndarray:
    """``(m, 3)`` columns ``1, 2^{-1/2} sin 2 pi u, 2^{-1/2} cos 2 pi u``."""
    u = np.asarray(u, dtype=float)
    r = 2 ** -0.5
    return np.column_stack([np.ones_like(u), r * np.sin(2 * np.pi * u), r * np.cos(2 * np.pi * u)])


def smooth_sd(s) -> np.ndarray:
    """``(n, 3)`` standard deviations of the spatially smooth score fields."""
    a, b = np.abs(s[:, 0]), np.abs(s[:, 1])
    return np.column_stack([a + b + 0.01, (3 * a + 27 * b) / 25 + 0.01, (9 * a + b) / 25 + 0.01])


@lru_cache(maxsize=8)
def _exp_cholesky(grid_shape: tuple, alpha: float) -> np.ndarray:
    dom = SpatialDomain.plane(grid_locations(grid_shape))
    R = np.exp(-pairwise_distances(dom) / alpha)
    L = np.linalg.cholesky(R)
    L.setflags(write=False)
    return L


def generate_scores(cfg: SimConfig, rep_index: int) -> np.ndarray:
    """Score fields ``Z`` of shape ``(n, N, 3)`` (smooth part plus nugget)."""
    s = grid_locations(cfg.grid_shape)
    n = s.shape[0]
    rng = RngSpec(cfg.seed).generator(rep_index, _DEPENDENCE_CODE[cfg.dependence], 0)
    sd = smooth_sd(s)
    Z = np.empty((n, cfg.N, 3))
    if cfg.dependence == "independent":
        e = rng.standard_normal((3, n, cfg.N))
        for q in range(3):
            Z[:, :, q] = np.sqrt(sd[:, q] ** 2 + NUGGET_VARIANCE)[:, None] * e[q]
        return Z
    e = rng.standard_normal((3, n, cfg.N))
    v = rng.standard_normal((3, n, cfg.N))
    for q in range(3):
        L = _exp_cholesky(cfg.grid_shape, RANGES[q])
        Z[:, :, q] = sd[:, q, None] * (L @ e[q]) + np.sqrt(NUGGET_VARIANCE) * v[q]
    return Z


def generate_errors(cfg: SimConfig, rep_index: int) -> np.ndarray:
    """``eps[i, k, j]`` = components weighted by scores plus white noise."""
    Z = generate_scores(cfg, rep_index)
    u = uniform_grid(cfg.m)
    rng = RngSpec(cfg.seed).generator(rep_index, _DEPENDENCE_CODE[cfg.dependence], 1)
    W = np.sqrt(NOISE_VARIANCE) * rng.standard_normal((Z.shape[0], cfg.N, cfg.m))
    return Z @ component_functions(u).T + W


def assemble(cfg: SimConfig, errors: np.ndarray):
    s = grid_locations(cfg.grid_shape)
    u = uniform_grid(cfg.m)
    mu, delta, tau = eval_truth(s, u, cfg.eta, cfg.N)
    k = np.arange(1, cfg.N + 1)
    after = k[None, :] > tau[:, None]
    values = mu[:, None, :] + after[:, :, None] * delta[:, None, :] + errors
    ds = FunctionalDataset(SpatialDomain.plane(s), values, u)
    return ds, SimTruth(tau, tau < cfg.N, mu, delta)


def generate_dataset(cfg: SimConfig, rep_index: int):
    """Dataset and truth for one replicate; deterministic in ``(seed, rep_index, dependence)``."""
    return assemble(cfg, generate_errors(cfg, rep_index))


# ---------------------------------------------------------------------------
# detectors and metrics


def run_detectors(ds: FunctionalDataset, detectors: Sequence[Detector], method: str = "exact",
                  nulls: Optional[NullSettings] = None) -> dict:
    """Reports keyed by detector name; one spatial fit per distinct ``Q``."""
    nulls = nulls or NullSettings()
    fits: dict[int, SpatialPrediction] = {}
    out = {}
    for det in detectors:
        if det.needs_prediction and det.Q not in fits:
            fits[det.Q] = fit_spatial_prediction(ds, PipelineConfig(Q=det.Q, method=method))
        if det.flavor == "individual":
            out[det.name] = individual_reports(ds, det.Q, "amoc", det.family, nulls)
        else:
            flavor = "primary" if det.family == "ff" else det.flavor
            out[det.name] = predicted_reports(ds, fits[det.Q], flavor, det.family, "amoc", nulls)
    return out


@dataclass
class MetricAccumulator:
    null_locations: int = 0
    false_positives: int = 0
    change_locations: int = 0
    false_negatives: int = 0
    fdp: list = field(default_factory=list)
    family_errors: list = field(default_factory=list)
    sq_errors: list = field(default_factory=list)

    def add(self, change: np.ndarray, reject: np.ndarray, reject_bh: np.ndarray, reject_bonf: np.ndarray,
            tau_hat: Optional[np.ndarray] = None, tau_true: Optional[np.ndarray] = None) -> None:
        change = np.asarray(change, bool)
        null = ~change
        self.null_locations += int(null.sum())
        self.false_positives += int(np.sum(reject & null))
        self.change_locations += int(change.sum())
        self.false_negatives += int(np.sum(~reject & change))
        n_bh = int(reject_bh.sum())
        self.fdp.append(np.sum(reject_bh & null) / n_bh if n_bh else 0.0)
        self.family_errors.append(bool(np.any(reject_bonf & null)))
        if tau_hat is not None and change.any():
            self.sq_errors.extend(((np.asarray(tau_hat) - tau_true)[change] ** 2).tolist())

    def metrics(self) -> dict:
        nan = float("nan")
        return {
            "FPR": self.false_positives / self.null_locations if self.null_locations else nan,
            "FNR": self.false_negatives / self.change_locations if self.change_locations else nan,
            "FDR": float(np.mean(self.fdp)) if self.fdp else nan,
            "FWER": float(np.mean(self.family_errors)) if self.family_errors else nan,
            "RMSE": float(np.sqrt(np.mean(self.sq_errors))) if self.sq_errors else nan,
        }


def score_report(acc: MetricAccumulator, report: ChangepointReport, truth: SimTruth, alpha: float) -> None:
    acc.add(truth.changed, report.rejections(alpha), report.rejections(alpha, "bh"),
            report.rejections(alpha, "bonferroni"), report.tau, truth.change_index)


@dataclass(frozen=True, eq=False)
class MetricsTable:
    rows: tuple  # dicts with eta, dependence, detector, metric, value

    def value(self, detector: str, metric: str, eta=None, dependence=None) -> float:
        hits = [r["value"] for r in self.rows if r["detector"] == detector and r["metric"] == metric
                and (eta is None or r["eta"] == eta) and (dependence is None or r["dependence"] == dependence)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {detector}/{metric}/{eta}/{dependence}")
        return hits[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "dependence", "detector", "metric", "value"])
        for r in self.rows:
            w.writerow([repr(float(r["eta"])), r["dependence"], r["detector"], r["metric"], format_float(r["value"])])
        return buf.getvalue()

    def summary(self) -> dict:
        out: dict = {}
        for r in self.rows:
            key = f"eta={float(r['eta'])!r}/{r['dependence']}"
            v = r["value"]
            out.setdefault(key, {}).setdefault(r["detector"], {})[r["metric"]] = None if math.isnan(v) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def concat(cls, tables: Iterable["MetricsTable"]) -> "MetricsTable":
        return cls(tuple(r for t in tables for r in t.rows))


def format_float(x: float) -> str:
    return "nan" if math.isnan(x) else format(float(x), ".17g")


def _replicate_task(args):
    cfg, rep, etas = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        errors = generate_errors(cfg, rep)
        out = []
        for eta in etas:
            c = replace(cfg, eta=float(eta))
            ds, truth = assemble(c, errors)
            reports = run_detectors(ds, c.detectors, c.method, c.nulls)
            out.append((truth, reports))
        return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GEOFTSCP_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(cfg: SimConfig, etas: Sequence[float], dependences: Sequence[str] = ("independent",),
              workers: Optional[int] = None) -> MetricsTable:
    """Run every ``(eta, dependence)`` cell with shared noise across ``eta``.

    Replicates are distributed over ``workers`` processes; results are
    gathered in replicate order so output never depends on the worker count.
    """
    workers = worker_count() if workers is None else workers
    rows = []
    for dep in dependences:
        base = replace(cfg, dependence=dep)
        tasks = [(base, rep, tuple(etas)) for rep in range(cfg.replicates)]
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
                results = list(pool.map(_replicate_task, tasks))
        else:
            results = [_replicate_task(t) for t in tasks]
        for e_idx, eta in enumerate(etas):
            for det in cfg.detectors:
                acc = MetricAccumulator()
                for rep_out in results:
                    truth, reports = rep_out[e_idx]
                    score_report(acc, reports[det.name], truth, cfg.alpha)
                for metric, value in acc.metrics().items():
                    rows.append({"eta": float(eta), "dependence": dep, "detector": det.name,
                                 "metric": metric, "value": value})
    return MetricsTable(tuple(rows))


def run_study(cfg: SimConfig, workers: Optional[int] = None) -> MetricsTable:
    """Metrics for the single ``(cfg.eta, cfg.dependence)`` cell."""
    return run_sweep(cfg, (cfg.eta,), (cfg.dependence,), workers)


def config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["detectors"] = [asdict(x) for x in cfg.detectors]
    return d
