import csv
import json
import subprocess
import sys
import warnings

import numpy as np
import pytest

from geoftscp.cli import main, report_csv, run_detect
from geoftscp.core import FunctionalDataset, SpatialDomain, uniform_grid
from geoftscp.gfts import read_gfts, write_gfts
from geoftscp.pipeline import DegenerateSpatialFit, PipelineConfig, fit_spatial_prediction

FAST = {"replicates": 10000, "grid_size": 200}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _simulate(tmp_path, cfg, name="out"):
    c = _write(tmp_path / f"{name}.json", cfg)
    out = tmp_path / name
    assert main(["simulate", "-c", str(c), "-o", str(out)]) == 0
    return out


def test_minimal_simulate_has_five_metric_rows(tmp_path):
    out = _simulate(tmp_path, {"replicates": 1, "eta": 10, "dependence": "independent",
                               "detectors": [{"family": "score", "flavor": "individual", "Q": 4}]})
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["metric"] for r in rows] == ["FPR", "FNR", "FDR", "FWER", "RMSE"]
    assert json.loads((out / "summary.json").read_text())["eta"] == [10.0]
    assert not list(out.glob(".staging-*"))


def test_simulate_is_byte_identical_across_runs_and_threads(tmp_path, monkeypatch):
    cfg = {"replicates": 2, "eta": [0, 10], "dependence": ["independent", "dependent"], "seed": 3,
           "detectors": [{"family": "score", "flavor": "individual", "Q": 2},
                         {"family": "score", "flavor": "primary", "Q": 2}], "null": FAST}
    texts = []
    for threads, name in (("1", "a"), ("1", "b"), ("8", "c")):
        monkeypatch.setenv("GEOFTSCP_THREADS", threads)
        out = _simulate(tmp_path, cfg, name)
        texts.append(((out / "metrics.csv").read_bytes(), (out / "summary.json").read_bytes()))
    assert texts[0] == texts[1] == texts[2]


def test_negative_eta_names_field(tmp_path, capsys):
    c = _write(tmp_path / "bad.json", {"eta": -1})
    assert main(["simulate", "-c", str(c), "-o", str(tmp_path / "o")]) == 2
    assert "'eta'" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    c = _write(tmp_path / "bad.json", {"Q": 3, "colour": "red"})
    assert main(["detect", "-d", str(tmp_path), "-c", str(c), "-o", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


@pytest.fixture(scope="module")
def saved_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    out = _simulate(tmp, {"replicates": 1, "eta": 10, "save_datasets": True, "null": FAST,
                          "detectors": [{"family": "score", "flavor": "individual", "Q": 2}]})
    d = out / "datasets" / "independent_eta10_rep0"
    assert (d / "truth.csv").exists()
    return d


@pytest.mark.parametrize("raw", [
    {"Q": 3, "flavor": "primary"},
    {"Q": 3, "flavor": "individual", "model": "epidemic"},
    {"Q": 2, "family": "ff", "flavor": "predicted", "pilot": "bh"},
])
def test_detect_matches_in_process(tmp_path, saved_dataset, raw):
    raw = dict(raw, null=dict(FAST, ff_replicates=10000, ff_grid_size=200))
    c = _write(tmp_path / "d.json", raw)
    outs = []
    for name in ("x", "y"):
        assert main(["detect", "-d", str(saved_dataset), "-c", str(c), "-o", str(tmp_path / name)]) == 0
        outs.append(((tmp_path / name / "report.csv").read_bytes(), (tmp_path / name / "model.json").read_bytes()))
    assert outs[0] == outs[1]
    ds = read_gfts(saved_dataset)
    report, info = run_detect(ds, raw)
    assert outs[0][0].decode() == report_csv(ds, report)
    model = json.loads(outs[0][1])
    assert model["Q"] == raw["Q"]
    if raw["flavor"] != "individual":
        assert len(model["spatial"]["theta"]) == raw["Q"]
    header = outs[0][0].decode().splitlines()[0]
    assert header.startswith("id,x,y,statistic,p,p_bh,p_bonf")


def test_report_aggregates(tmp_path, saved_dataset, capsys):
    c = _write(tmp_path / "d.json", {"Q": 2, "null": FAST})
    assert main(["detect", "-d", str(saved_dataset), "-c", str(c), "-o", str(tmp_path / "det")]) == 0
    sim = saved_dataset.parent.parent
    assert main(["report", "-i", str(sim), str(tmp_path / "det"), "-o", str(tmp_path / "all.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "all.csv")))
    assert {r["run"] for r in rows} == {sim.name, "det"}
    assert [r["value"] for r in rows if r["metric"] == "locations"] == ["300"]


def test_single_location_dataset(tmp_path):
    rng = np.random.default_rng(4)
    ds = FunctionalDataset(SpatialDomain.plane([[0.3, 0.6]]), rng.normal(size=(1, 10, 12)), uniform_grid(12))
    write_gfts(ds, tmp_path / "one")
    c = _write(tmp_path / "d.json", {"Q": 2, "flavor": "primary", "null": FAST})
    with pytest.warns(UserWarning):
        assert main(["detect", "-d", str(tmp_path / "one"), "-c", str(c), "-o", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "report.csv").read_text().splitlines()) == 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpatialFit)
        fit = fit_spatial_prediction(ds, PipelineConfig(Q=2))
    sig, gam = fit.pca.sigma2_hat, fit.pca.gamma2_hat
    shrink = sig / (sig + gam)
    assert np.allclose(fit.zhat, shrink[:, None, :] * fit.pca.scores, atol=1e-12)


def test_malformed_csv_exit_code(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ds = FunctionalDataset(SpatialDomain.plane(rng.uniform(size=(3, 2))), rng.normal(size=(3, 4, 5)), uniform_grid(5))
    write_gfts(ds, tmp_path / "data")
    f = tmp_path / "data" / "values.csv"
    lines = f.read_text().splitlines(keepends=True)
    lines[7] = "0,1,2,oops\n"
    f.write_text("".join(lines))
    c = _write(tmp_path / "d.json", {"Q": 2})
    assert main(["detect", "-d", str(tmp_path / "data"), "-c", str(c), "-o", str(tmp_path / "o")]) == 2
    assert "line 8" in capsys.readouterr().err
    assert not (tmp_path / "o" / "report.csv").exists()


def test_runtime_failure_exit_code(tmp_path, capsys):
    c = _write(tmp_path / "d.json", {"Q": 2})
    (tmp_path / "data").mkdir()
    # a dataset directory without a manifest is a data error (2); a missing report input is too
    assert main(["detect", "-d", str(tmp_path / "data"), "-c", str(c), "-o", str(tmp_path / "o")]) == 2
    assert main(["report", "-i", str(tmp_path / "data")]) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "geoftscp.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    bad = subprocess.run([sys.executable, "-m", "geoftscp.cli", "simulate", "-c", str(tmp_path / "none.json"),
                          "-o", str(tmp_path / "o")], capture_output=True, text=True)
    assert bad.returncode == 2 and "not found" in bad.stderr
