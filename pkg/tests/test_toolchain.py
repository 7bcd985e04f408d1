import csv
import json

import numpy as np
import pytest

from mvadjoint.adjoint import ImpactRecord, write_records_csv
from mvadjoint.errors import ConfigError, EmptyRecordSet, MissingArtifact
from mvadjoint.toolchain import report
from mvadjoint.toolchain.bench import CostReport, add_campaign_timings
from mvadjoint.toolchain.cli import main
from mvadjoint.toolchain.config import RunConfig

SMALL_CFG = {"grid": {"ni": 65, "nj": 21, "n_surface": 25},
             "batch": {"kind": "scans", "size": 2, "seed": 3, "n_fem": 40, "inject_zero": True}}


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL_CFG))
    return p


@pytest.fixture(scope="module")
def campaign_dir(cfg_file, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "r1"
    code = main(["validate", "--config", str(cfg_file), "--run-dir", str(run)])
    return run, code


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("raw, where", [
    ({"grid": {"ni": 4}}, "grid/ni"),
    ({"flow": {"p_exit": -1}}, "flow/p_exit"),
    ({"objectives": ["Efficiency"]}, "objectives/0"),
    ({"clamp": {"range": [0.9, 0.1]}}, "clamp"),
    ({"unknown": 1}, "<root>"),
])
def test_schema_errors(raw, where):
    with pytest.raises(ConfigError, match=where.split("/")[0]):
        RunConfig.from_dict(raw)


def test_defaults_resolved():
    cfg = RunConfig.from_dict({})
    assert cfg["grid"] == {"ni": 121, "nj": 41, "n_surface": 41}
    assert cfg.objectives == ["MassFlow", "PressureLossY"] and cfg.variants == ["AD"]
    assert RunConfig.from_dict({"variants": "both"}).variants == ["AD", "HD"]


def test_load_missing_and_invalid(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{\"grid\": ")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "bad.json")


# -- report --------------------------------------------------------------------

def _records(x, y, obj="MassFlow"):
    return [ImpactRecord(f"s{k}", obj, b, a, 100 * (b - a) / a if a else 0.0) for k, (a, b) in enumerate(zip(x, y))]


def test_regression_perfect():
    x = np.linspace(-1, 1, 20)
    f = report.regression(x, 2.0 * x + 0.5)
    assert f["slope"] == pytest.approx(2.0) and f["intercept"] == pytest.approx(0.5) and f["r2"] == pytest.approx(1.0)
    assert np.isnan(report.regression([1.0, 1.0], [2.0, 3.0])["slope"])


def test_histogram_bins():
    edges, counts = report.histogram([-0.1, 0.0, 1.0, 2.4, 2.5, 7.0], 2.5)
    assert edges.tolist() == [-2.5, 0.0, 2.5, 5.0, 7.5]
    assert counts.tolist() == [1, 3, 1, 1]
    with pytest.raises(EmptyRecordSet):
        report.histogram([])


def test_build_report_perfect(tmp_path):
    x = np.linspace(0.1, 1.0, 10)
    write_records_csv(_records(x, x), tmp_path / "records.csv")
    r = report.build_report(tmp_path)["MassFlow/AD"]
    assert r["regression"]["slope"] == pytest.approx(1.0) and r["regression"]["r2"] == pytest.approx(1.0)
    assert r["frac_within_10"] == 1.0
    for name in ("histogram_MassFlow_AD.csv", "histogram_MassFlow_AD.svg", "scatter_MassFlow_AD.csv",
                 "scatter_MassFlow_AD.svg", "regression.json"):
        assert (tmp_path / "report" / name).exists()
    assert (tmp_path / "report" / "scatter_MassFlow_AD.svg").read_text().startswith("<svg")


def test_report_empty_and_missing(tmp_path):
    with pytest.raises(MissingArtifact, match="records.csv"):
        report.build_report(tmp_path)
    write_records_csv([], tmp_path / "records.csv")
    with pytest.raises(EmptyRecordSet):
        report.build_report(tmp_path)


def test_sensitivity_zones():
    arc = np.linspace(0, 1, 101)
    g = np.sin(2 * np.pi * arc) * (1 + arc)
    z = report.sensitivity_zones(arc, g, n=2)
    assert [round(v["arc_fraction"], 2) for v in z] == [0.76, 0.27]
    assert z[0]["direction"] != z[1]["direction"]


# -- bench -----------------------------------------------------------------------

def test_cost_ratios():
    rep = CostReport(2.0, 4.0, 100, {"MassFlow": 1.0}, {"MassFlow": 2.0}, {"MassFlow": 150}, {"MassFlow": 10})
    add_campaign_timings(rep, {"n_samples": 4, "batch_adjoint_s": 5.0, "batch_nonlinear_s": 50.0,
                               "measure_s": 0.4, "predict_s": 0.4, "nonlinear_s": 40.0})
    assert rep.adjoint_cpu_ratio == {"MassFlow": 0.5} and rep.adjoint_memory_ratio == {"MassFlow": 1.5}
    assert rep.batch_ratio == pytest.approx(0.1)
    assert rep.per_sample_predict_s == pytest.approx(0.2) and rep.per_sample_resolve_s == pytest.approx(10.0)
    assert "ratio 10.00%" in "\n".join(rep.lines())


# -- campaign and CLI ------------------------------------------------------------

def test_campaign_partial_exit(campaign_dir):
    run, code = campaign_dir
    assert code == 4
    summary = json.loads((run / "summary.json").read_text())
    for key in ("MassFlow/AD", "PressureLossY/AD"):
        s = summary["objectives"][key]
        assert s["n_samples"] == 3 and s["n_excluded"] == 1
        assert s["excluded"] == {"zero": "degenerate"}
    with open(run / "records.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and sum(r["status"] != "ok" for r in rows) == 2


def test_run_dir_layout(campaign_dir):
    run, _ = campaign_dir
    for name in ("config.json", "resolved_config.json", "records.csv", "summary.json", "timings.json",
                 "solutions/baseline.npz", "meshes/baseline.p2d", "meshes/sample_scan_0000.p2d",
                 "adjoints/MassFlow_AD.npz", "adjoints/PressureLossY_AD_surface.csv"):
        assert (run / name).exists(), name
    assert json.loads((run / "config.json").read_text()) == SMALL_CFG


def test_campaign_reproducible(cfg_file, campaign_dir, tmp_path):
    run, _ = campaign_dir
    assert main(["validate", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r2")]) == 4
    a = (run / "records.csv").read_text()
    b = (tmp_path / "r2" / "records.csv").read_text()
    assert a == b


def test_cli_report_and_bench(campaign_dir, cfg_file, tmp_path, capsys):
    run, _ = campaign_dir
    assert main(["report", str(run)]) == 0
    assert "MassFlow/AD: n=2" in capsys.readouterr().out
    out = tmp_path / "cost.json"
    assert main(["bench", "--config", str(cfg_file), "--run-dir", str(run), "--out", str(out)]) == 0
    cost = json.loads(out.read_text())
    assert cost["n_samples"] == 3 and cost["batch_ratio"] > 0
    assert set(cost["adjoint_cpu_ratio"]) == {"MassFlow", "PressureLossY"}


def test_cli_measurement_chain(cfg_file, tmp_path, capsys):
    c = str(cfg_file)
    assert main(["gen-case", "--config", c, "--out", str(tmp_path / "case")]) == 0
    mesh = str(tmp_path / "case" / "mesh.p2d")
    assert main(["scan-gen", "--config", c, "--seed", "5", "--out", str(tmp_path / "s.stl"), "--binary"]) == 0
    assert main(["deviate", "--config", c, "--scan", str(tmp_path / "s.stl"), "--out", str(tmp_path / "d.csv")]) == 0
    assert main(["morph", "--config", c, "--mesh", mesh, "--deviations", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "m.p2d")]) == 0
    assert main(["solve", "--config", c, "--mesh", mesh, "--out", str(tmp_path / "sol")]) == 0
    assert main(["adjoint", "--config", c, "--mesh", mesh, "--solution", str(tmp_path / "sol" / "solution.npz"),
                 "--out", str(tmp_path / "adj")]) == 0
    capsys.readouterr()
    assert main(["predict", "--config", c, "--mesh", mesh, "--deviations", str(tmp_path / "d.csv"),
                 "--sensitivity", str(tmp_path / "adj" / "surface_MassFlow_AD.csv")]) == 0
    assert "dF_adjoint" in capsys.readouterr().out
    assert main(["sensitivity-map", "--config", c, "--mesh", mesh, "--objective", "PressureLossY",
                 "--solution", str(tmp_path / "sol" / "solution.npz"), "--out", str(tmp_path / "sm")]) == 0
    assert (tmp_path / "sm" / "sensitivity_PressureLossY_AD.svg").exists()


def test_cli_config_error_exit(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"grid": {"ni": "many"}}))
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["report", str(tmp_path / "empty")]) == 2


def test_cli_numerical_failure_exit(tmp_path):
    p = tmp_path / "short.json"
    p.write_text(json.dumps({"grid": SMALL_CFG["grid"], "flow": {"max_iter": 3}}))
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert main(["adjoint", "--config", str(p), "--out", str(tmp_path / "a")]) == 3
