"""``geoftscp`` command line: simulate, detect, report.

Exit codes: 0 success, 2 usage/config/data-format errors, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .basis import estimate_mean_and_change
from .changepoint import ChangepointReport, NullSettings, change_magnitude, individual_reports, predicted_reports
from .core import ChangeConfig, GeoFTSError
from .gfts import atomic_write_text, fmt, read_gfts, write_gfts
from .pipeline import PipelineConfig, fit_spatial_prediction
from .simstudy import Detector, SimConfig, assemble, config_dict, generate_errors, run_sweep, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


_NULL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "replicates": {"type": "integer", "minimum": 10000},
        "grid_size": {"type": "integer", "minimum": 200},
        "ff_replicates": {"type": "integer", "minimum": 10000},
        "ff_grid_size": {"type": "integer", "minimum": 200},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_DETECTOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "flavor"],
    "properties": {
        "family": {"enum": ["score", "ff"]},
        "flavor": {"enum": ["individual", "primary", "unadjusted", "recomputed", "predicted"]},
        "Q": {"type": "integer", "minimum": 1},
    },
}

_ETA = {"type": "number", "minimum": 0}

SIMULATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "replicates": {"type": "integer", "minimum": 1},
        "eta": {"oneOf": [_ETA, {"type": "array", "items": _ETA, "minItems": 1}]},
        "dependence": {"oneOf": [{"enum": ["independent", "dependent"]},
                                 {"type": "array", "items": {"enum": ["independent", "dependent"]}, "minItems": 1}]},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "method": {"enum": ["exact", "vecchia"]},
        "detectors": {"type": "array", "items": _DETECTOR_SCHEMA, "minItems": 1},
        "null": _NULL_SCHEMA,
        "save_datasets": {"type": "boolean"},
    },
}

DETECT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "Q": {"type": "integer", "minimum": 1},
        "model": {"enum": ["amoc", "epidemic"]},
        "family": {"enum": ["score", "ff"]},
        "flavor": {"enum": ["individual", "primary", "unadjusted", "recomputed", "predicted"]},
        "pilot": {"enum": ["null", "alt", "bh", "bonf", "all"]},
        "method": {"enum": ["exact", "vecchia"]},
        "kind": {"enum": ["matern", "aniso"]},
        "num_neighbors": {"type": "integer", "minimum": 1},
        "bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "smooth_covariance": {"type": "boolean"},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "null": _NULL_SCHEMA,
    },
}


def load_config(path, schema) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} line {e.lineno}: {e.msg}") from e
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise ConfigError(f"config field {where!r}: {err.message}")
    return cfg


def _as_list(x):
    return list(x) if isinstance(x, list) else [x]


def null_settings(cfg: dict) -> NullSettings:
    return NullSettings(**cfg.get("null", {}))


class Staging:
    """Collect outputs in a hidden directory and move them into place only on success."""

    def __init__(self, outdir):
        self.outdir = Path(outdir)

    def __enter__(self) -> Path:
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.outdir, prefix=".staging-"))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for p in sorted(self.tmp.iterdir()):
                    dest = self.outdir / p.name
                    if dest.is_dir():
                        shutil.rmtree(dest)
                    p.replace(dest)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(config_path, outdir) -> None:
    raw = load_config(config_path, SIMULATE_SCHEMA)
    etas = [float(x) for x in _as_list(raw.get("eta", 10.0))]
    deps = _as_list(raw.get("dependence", "independent"))
    try:
        dets = tuple(Detector(d["family"], d["flavor"], d.get("Q", 4))
                     for d in raw.get("detectors", [{"family": "score", "flavor": "individual"}]))
        cfg = SimConfig(eta=etas[0], dependence=deps[0], replicates=raw.get("replicates", 20), seed=raw.get("seed", 0),
                        detectors=dets, alpha=raw.get("alpha", 0.05), method=raw.get("method", "exact"),
                        nulls=null_settings(raw))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    table = run_sweep(cfg, etas, deps, workers=worker_count())
    with Staging(outdir) as tmp:
        atomic_write_text(tmp / "metrics.csv", table.to_csv())
        summary = {"version": __version__, "config": config_dict(cfg), "eta": etas, "dependence": deps,
                   "metrics": table.summary()}
        atomic_write_text(tmp / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if raw.get("save_datasets", False):
            for dep in deps:
                c = replace(cfg, dependence=dep)
                for rep in range(cfg.replicates):
                    errors = generate_errors(c, rep)
                    for eta in etas:
                        ds, truth = assemble(replace(c, eta=eta), errors)
                        d = tmp / "datasets" / f"{dep}_eta{eta:g}_rep{rep}"
                        write_gfts(ds, d)
                        buf = io.StringIO()
                        w = csv.writer(buf, lineterminator="\n")
                        w.writerow(["loc_id", "tau", "change"])
                        for i, (t, ch) in enumerate(zip(truth.tau, truth.changed)):
                            w.writerow([i, fmt(t), int(ch)])
                        atomic_write_text(d / "truth.csv", buf.getvalue())


# ---------------------------------------------------------------------------
# detect


def _pilot(ds, Q, choice, alpha, nulls):
    if choice == "null":
        return None
    ind = individual_reports(ds, Q, "amoc", "ff", nulls)
    sel = {"alt": ind.rejections(alpha), "bh": ind.rejections(alpha, "bh"),
           "bonf": ind.rejections(alpha, "bonferroni"), "all": np.ones(ds.n, bool)}[choice]
    return ChangeConfig("amoc", np.where(sel, ind.tau, ds.N))


def run_detect(ds, raw: dict):
    """Report and model summary for a dataset; shared by the CLI and in-process callers."""
    Q = raw.get("Q", 4)
    model = raw.get("model", "amoc")
    family = raw.get("family", "score")
    flavor = raw.get("flavor", "individual")
    alpha = raw.get("alpha", 0.05)
    nulls = null_settings(raw)
    if family == "ff" and flavor not in ("individual", "predicted"):
        raise ConfigError(f"config field 'flavor': {flavor!r} is not available for the ff family")
    if family == "score" and flavor == "predicted":
        raise ConfigError("config field 'flavor': use primary, unadjusted or recomputed for the score family")
    if family == "ff" and model != "amoc":
        raise ConfigError("config field 'model': the ff family supports amoc only")
    if raw.get("pilot", "null") != "null" and family != "ff":
        raise ConfigError("config field 'pilot': alternative pilots apply to the ff family only")
    if Q >= ds.m:
        raise ConfigError(f"config field 'Q': must be smaller than m = {ds.m}")

    info = {"version": __version__, "Q": Q, "model": model, "family": family, "flavor": flavor}
    if flavor == "individual":
        report = individual_reports(ds, Q, model, family, nulls)
    else:
        pcfg = PipelineConfig(Q=Q, kind=raw.get("kind", "matern"), method=raw.get("method", "exact"),
                              num_neighbors=raw.get("num_neighbors", 8), bandwidth=raw.get("bandwidth"),
                              smooth_covariance=raw.get("smooth_covariance", False))
        change = _pilot(ds, Q, raw.get("pilot", "null"), alpha, nulls) if family == "ff" else None
        if model == "epidemic":
            change = ChangeConfig("epidemic") if change is None else change
        fit = fit_spatial_prediction(ds, pcfg, change)
        report = predicted_reports(ds, fit, "primary" if family == "ff" else flavor, family, model, nulls)
        info["spatial"] = {
            "method": pcfg.method,
            "eigenvalues": fit.pca.eigenvalues.tolist(),
            "bandwidth": fit.pca.bandwidth,
            "zeta_mu": fit.mean.zeta_mu,
            "zeta_delta": fit.mean.zeta_delta,
            "theta": [dict(f.params.to_dict(), loglik=f.loglik, converged=f.converged) for f in fit.cov.fits],
        }
    tau = report.tau if model == "amoc" else np.column_stack([report.tau1, report.tau2])
    alt = estimate_mean_and_change(ds, ChangeConfig(model, tau))
    delta_hat = change_magnitude(alt, ds.u_grid)
    report = ChangepointReport(report.family, report.flavor, report.model, report.statistic, report.p_raw,
                               report.p_bh, report.p_bonf, delta_hat, report.tau, report.tau1, report.tau2,
                               report.active_components)
    info["change_fit"] = {"zeta_mu": alt.zeta_mu, "zeta_delta": alt.zeta_delta}
    return report, info


def report_csv(ds, report: ChangepointReport) -> str:
    names = ("lon", "lat") if ds.domain.kind == "sphere" else ("x", "y")
    cols = ["id", *names, "statistic", "p", "p_bh", "p_bonf"]
    cols += ["tau_hat"] if report.model == "amoc" else ["tau1", "tau2"]
    cols.append("delta_hat")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for i in range(ds.n):
        row = [i, fmt(ds.domain.coords[i, 0]), fmt(ds.domain.coords[i, 1]), fmt(report.statistic[i]),
               fmt(report.p_raw[i]), fmt(report.p_bh[i]), fmt(report.p_bonf[i])]
        row += [int(report.tau[i])] if report.model == "amoc" else [int(report.tau1[i]), int(report.tau2[i])]
        row.append(fmt(report.delta_hat[i]))
        w.writerow(row)
    return buf.getvalue()


def cmd_detect(data_path, config_path, outdir) -> None:
    raw = load_config(config_path, DETECT_SCHEMA)
    try:
        ds = read_gfts(data_path)
    except GeoFTSError as e:
        raise ConfigError(f"dataset {data_path}: {e}") from e
    if ds.n == 1 and raw.get("flavor", "individual") != "individual":
        warnings.warn("dataset has a single location; spatial prediction reduces to nugget shrinkage")
    report, info = run_detect(ds, raw)
    with Staging(outdir) as tmp:
        atomic_write_text(tmp / "report.csv", report_csv(ds, report))
        atomic_write_text(tmp / "model.json", json.dumps(info, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# report


def cmd_report(inputs, output=None) -> str:
    """Stack ``metrics.csv`` files and summarize ``report.csv`` rejections into one table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "eta", "dependence", "detector", "metric", "value"])
    for d in inputs:
        d = Path(d)
        metrics, report = d / "metrics.csv", d / "report.csv"
        if metrics.exists():
            with open(metrics, newline="") as f:
                for r in csv.DictReader(f):
                    w.writerow([d.name, r["eta"], r["dependence"], r["detector"], r["metric"], r["value"]])
        elif report.exists():
            model = json.loads((d / "model.json").read_text()) if (d / "model.json").exists() else {}
            det = "-".join(str(model.get(k, "?")) for k in ("family", "flavor")) + f"-Q{model.get('Q', '?')}"
            with open(report, newline="") as f:
                rows = list(csv.DictReader(f))
            for col, name in (("p", "rejected_raw"), ("p_bh", "rejected_bh"), ("p_bonf", "rejected_bonf")):
                w.writerow([d.name, "", "", det, name, sum(float(r[col]) < 0.05 for r in rows)])
            w.writerow([d.name, "", "", det, "locations", len(rows)])
        else:
            raise ConfigError(f"{d} holds neither metrics.csv nor report.csv")
    text = buf.getvalue()
    if output:
        atomic_write_text(output, text)
    else:
        sys.stdout.write(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoftscp", description="Spatially-informed changepoint detection for functional time series.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="run the simulation study and write metrics")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-o", "--outdir", required=True)
    d = sub.add_parser("detect", help="run changepoint detection on a GFTS dataset")
    d.add_argument("-d", "--data", required=True)
    d.add_argument("-c", "--config", required=True)
    d.add_argument("-o", "--outdir", required=True)
    r = sub.add_parser("report", help="aggregate outputs of several runs")
    r.add_argument("-i", "--inputs", nargs="+", required=True)
    r.add_argument("-o", "--output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(1):
            if args.command == "simulate":
                cmd_simulate(args.config, args.outdir)
            elif args.command == "detect":
                cmd_detect(args.data, args.config, args.outdir)
            else:
                cmd_report(args.inputs, args.output)
    except ConfigError as e:
        print(f"geoftscp: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"geoftscp: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
