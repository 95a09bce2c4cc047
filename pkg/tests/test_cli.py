import csv
import json
import os

import numpy as np
import pytest

from nhflow import cli
from nhflow.expr import Chart

SPECS = os.path.join(os.path.dirname(__file__), os.pardir, "specs")


def spec(name):
    return os.path.join(SPECS, name)


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = cli.main(list(args) + ["--out", str(out)])
    return code, out


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


FLAT = """
[chart]
n = 2
m = 1
[metric]
g = [["1", "0"], ["0", "1"]]
h = [["1"]]
"""


# spec loading

def test_minimal_spec_is_flat(tmp_path):
    s = cli.load_spec(write(tmp_path, "f.toml", FLAT))
    assert (s.chart.n, s.chart.m) == (2, 1)
    assert s.dmetric().N.N[0, 0].kind == "const"


def test_json_spec_accepted(tmp_path):
    doc = {"chart": {"n": 2, "m": 1}, "metric": {"g": [["1", "0"], ["0", "1"]], "h": [["1"]]}}
    s = cli.load_spec(write(tmp_path, "f.json", json.dumps(doc)))
    assert s.chart.dim == 3


def test_provenance_conflict(tmp_path, capsys):
    p = write(tmp_path, "c.toml", FLAT.replace("[chart]\nn = 2\nm = 1",
                                               "[chart]\nn = 2\nm = 2")
              .replace('h = [["1"]]', 'h = [["1", "0"], ["0", "1"]]')
              + '[lagrangian]\nkind = "lagrange"\nL = "y3^2 + y4^2"\n')
    with pytest.raises(cli.SpecError, match="provenance"):
        cli.load_spec(p)
    assert cli.main(["check", p, "--out", str(tmp_path / "o")]) == 2
    assert "provenance" in capsys.readouterr().err


def test_finsler_witness_point(tmp_path):
    p = write(tmp_path, "f.toml", '[chart]\nn = 2\nm = 2\n[lagrangian]\nkind = "finsler"\n'
                                  'F = "y3^2 + y4^2"\n')
    with pytest.raises(cli.SpecError) as info:
        cli.load_spec(p)
    assert "homogeneity" in str(info.value) and "[" in str(info.value)


def test_parse_error_names_location(tmp_path):
    p = write(tmp_path, "e.toml", FLAT.replace('"1", "0"], ["0"', '"1 +", "0"], ["0"'))
    with pytest.raises(cli.SpecError) as info:
        cli.load_spec(p)
    assert "metric" in str(info.value)


def test_missing_spec_is_usage_error(tmp_path):
    assert run(tmp_path, "check", str(tmp_path / "nope.toml"))[0] == 2


def test_unknown_command_and_bad_points(tmp_path):
    p = write(tmp_path, "f.toml", FLAT)
    assert run(tmp_path, "frobnicate", p)[0] == 2
    assert run(tmp_path, "check", p, "--points", "0")[0] == 2


# --at parsing

def test_at_parsing():
    ch = Chart(2, 1)
    X = cli._points_from_at("x1=1, x2=2,y3=3; x1=0,x2=0,y3=-1.5", ch)
    assert np.array_equal(X, [[1, 2, 3], [0, 0, -1.5]])


@pytest.mark.parametrize("at", ["x1=1,x2=2", "x1=1,x2=2,y3=a", "x1=1,x2=2,y3=3,q=1", "x1", ""])
def test_at_errors(at):
    with pytest.raises(cli.SpecError):
        cli._points_from_at(at, Chart(2, 1))


# commands

def test_check_flat_passes(tmp_path):
    code, out = run(tmp_path, "check", spec("flat.toml"), "--points", "20")
    assert code == 0
    rep = json.loads((out / "check_report.json").read_text())
    assert rep["status"] == "pass"
    assert all(e["status"] in ("pass", "reported") for e in rep["entries"])
    assert all(e["anchor"] in cli.ANCHORS.values() for e in rep["entries"])
    assert rep["metadata"]["seed"] == 0


def test_check_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        assert cli.main(["check", spec("omega.toml"), "--points", "15", "--seed", "4",
                         "--out", str(d)]) == 0
    assert (a / "check_report.json").read_bytes() == (b / "check_report.json").read_bytes()


def test_report_on_omega_chart(tmp_path):
    code, out = run(tmp_path, "report", spec("omega.toml"), "--at", "x1=1,x2=2,y3=3")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    pt = rep["points"][0]
    assert pt["Omega"]["Omega^3_12"] == pytest.approx(-2.0)
    assert pt["torsion"]["T^a_ji"][0][0][1] == pytest.approx(-2.0)
    assert len(rep["points"]) == 1


def test_strict_paper_promotes_reported_entries(tmp_path):
    p = write(tmp_path, "w.toml", """
[chart]
n = 2
m = 1
domain = [[0.5, 2.5, false], [0.5, 2.5, false], [0.5, 2.5, false]]
[metric]
g = [["1", "0"], ["0", "1"]]
h = [["x1^2"]]
N = [["x1*y3", "x2^2"]]
""")
    code, out = run(tmp_path, "check", p, "--points", "10")
    assert code == 0
    rep = json.loads((out / "check_report.json").read_text())
    reported = [e for e in rep["entries"] if e["status"] == "reported"]
    assert reported and any(e["max_residual"] > e["tol"] for e in reported)
    code, out = run(tmp_path, "check", p, "--points", "10", "--strict-paper")
    assert code == 1
    rep = json.loads((out / "check_report.json").read_text())
    assert rep["status"] == "fail" and rep["metadata"]["strict_paper"]


def test_tol_override_can_fail(tmp_path):
    code, _ = run(tmp_path, "check", spec("omega.toml"), "--points", "5", "--tol", "1e-300")
    assert code == 1


def test_check_finsler(tmp_path):
    code, out = run(tmp_path, "check", spec("finsler_quartic.toml"), "--points", "10")
    assert code == 0
    names = {e["name"] for e in json.loads((out / "check_report.json").read_text())["entries"]}
    assert {"chern-torsion", "cartan-contraction", "lagrange-dconnection"} <= names


def test_geodesic_command(tmp_path):
    code, out = run(tmp_path, "geodesic", spec("finsler_quartic.toml"))
    assert code == 0
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["route", "s", "x1", "x2", "dx1", "dx2", "energy"]
    assert len(rows) == 1 + 2 * 1001
    rep = json.loads((out / "geodesic_report.json").read_text())
    assert rep["status"] == "pass"


def test_geodesic_needs_lagrangian(tmp_path):
    assert run(tmp_path, "geodesic", spec("flat.toml"))[0] == 2


def test_residual_command(tmp_path):
    code, out = run(tmp_path, "residual", spec("sphere_family.toml"), "--points", "20")
    assert code == 0
    rep = json.loads((out / "residual_report.json").read_text())
    e = {x["name"]: x for x in rep["entries"]}
    assert e["family-residual"]["status"] == "pass"
    assert e["family-residual"]["max_residual"] <= 1e-8


def test_residual_needs_tau(tmp_path):
    assert run(tmp_path, "residual", spec("flat.toml"))[0] == 2


def test_flow_command_small(tmp_path):
    text = open(spec("conformal_torus.toml")).read()
    text = text.replace("grid = [64, 64]", "grid = [16, 16]").replace("steps = 1000", "steps = 20") \
               .replace("stride = 100", "stride = 10").replace("dt = 1e-4", "dt = 1e-3")
    code, out = run(tmp_path, "flow", write(tmp_path, "t.toml", text))
    assert code == 0
    summary = json.loads((out / "flow_summary.json").read_text())
    assert summary["snapshots"] == 3 and summary["tau_final"] == pytest.approx(0.02)
    assert summary["oracle_relative_error"] <= 1e-3
    assert sorted(f for f in os.listdir(out) if f.startswith("snapshot")) == [
        f"snapshot_{k:04d}.{ext}" for k in range(3) for ext in ("csv", "json")]


def test_flow_breakdown_exit_code(tmp_path):
    p = write(tmp_path, "b.toml", """
[chart]
n = 2
m = 1
[metric]
g = [["1 + cos(x1)", "0"], ["0", "1"]]
h = [["1"]]
[flow]
block = "h"
grid = [16, 16]
dt = 1e-3
steps = 5
""")
    code, out = run(tmp_path, "flow", p)
    assert code == 3
    assert "degenerate" in json.loads((out / "flow_summary.json").read_text())["diagnostic"]


def test_flow_stability_guard_is_usage_error(tmp_path):
    text = open(spec("conformal_torus.toml")).read().replace("dt = 1e-4", "dt = 0.5")
    assert run(tmp_path, "flow", write(tmp_path, "t.toml", text))[0] == 2


def test_flow_needs_section(tmp_path):
    assert run(tmp_path, "flow", spec("flat.toml"))[0] == 2


# random charts and reports

def test_random_chart_documents_are_smooth_and_valid():
    rng = np.random.default_rng(11)
    doc = cli.random_chart_document(rng)
    text = json.dumps(doc)
    assert all(f in text for f in ("sin(",)) and "log" not in text
    dm = cli.spec_from_document(doc).dmetric()
    assert dm.chart.domain[0] == (0.0, 2 * np.pi, True)


def test_random_chart_passes_check(tmp_path):
    doc = cli.random_chart_document(np.random.default_rng(5))
    p = write(tmp_path, "r.json", json.dumps(doc))
    code, out = run(tmp_path, "check", p, "--points", "10")
    assert code == 0


def test_check_report_statuses():
    r = cli.CheckReport()
    r.add("omega-antisymmetry", [0.0, 1e-16], 2, 1e-14)
    r.add("mixed-ricci", 0.5, 2, 1e-8, reported=True)
    assert not r.failed
    r.add("mixed-ricci", 0.5, 2, 1e-8, reported=True, strict=True)
    assert r.failed
    d = r.to_dict()
    assert [e["status"] for e in d["entries"]] == ["pass", "reported", "fail"]
