import json
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from conformal_wp.cli import constants_csv, main, suite, worst_exit
from conformal_wp.fieldfile import read_field, write_field
from conformal_wp.fields import ScalarField, make_grid
from conformal_wp.scenario import (
    EXIT_CHECK,
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_USAGE,
    ScenarioError,
    config_from_dict,
    export_slice,
    parse_scenario,
    run_scenario,
)
from conformal_wp.verify import ModelSolutionSpec, model_sphere_solution

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

MINIMAL = {"grid": {"dim": 3, "shape": 6}, "operator": {"kind": "gp_exact", "p": 1}, "solver": "newton"}

NEGATIVE = {
    "name": "neg",
    "grid": {"dim": 3, "shape": 6, "extent": 1.0},
    "background": {"type": "constant", "scalar": -1.0},
    "operator": {"kind": "gp_exact", "p": 1},
    "rhs": -1.0,
    "solver": "continuity_negative",
    "checks": [{"name": "reference", "expr": "-log(2)", "tol": 1e-8}],
}


def _write(dirpath, name, doc):
    path = Path(dirpath) / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


def _variant(name, **changes):
    doc = json.loads(json.dumps(NEGATIVE))
    doc["name"] = name
    doc.update(changes)
    return doc


# parsing

def test_minimal_config_gets_defaults():
    cfg = config_from_dict(dict(MINIMAL))
    assert cfg.solve.residual_tol == 1e-8
    assert cfg.grid.shape == (6, 6, 6) and cfg.grid.topology == "periodic"
    assert cfg.rhs == -1.0 and cfg.checks == ()
    assert cfg.outputs["formats"] == ["field"]


@pytest.mark.parametrize("patch,field", [
    ({"operator": {"kind": "gp_soft", "p": 1}}, "operator.tau"),
    ({"solver": "dirichlet"}, "solver"),
    ({"colour": "red"}, "colour"),
    ({"grid": {"dim": 3, "shape": 6, "spacing": 1}}, "grid.spacing"),
    ({"checks": [{"name": "nope"}]}, "checks[0].name"),
    ({"solver": "magic"}, "solver"),
    ({"rhs": {"expr": "x9"}}, "rhs.expr"),
    ({"outputs": {"formats": ["png"]}}, "outputs.formats"),
    ({"solve": {"residual_tol": 1e-8, "bogus": 1}}, "solve.bogus"),
])
def test_validation_names_the_field(patch, field):
    doc = dict(MINIMAL, **patch)
    with pytest.raises(ScenarioError) as info:
        config_from_dict(doc)
    assert info.value.field == field
    assert field in str(info.value)


def test_json_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "grid": {"dim": 3,,}\n}')
    with pytest.raises(ScenarioError) as info:
        parse_scenario(p)
    assert "line 2" in str(info.value) and "column" in str(info.value)


def test_shipped_scenarios_parse():
    for p in sorted(SCENARIOS.glob("*.json")) + sorted((SCENARIOS / "expected").glob("*.json")):
        parse_scenario(p)


# running

def test_run_constant_negative(tmp_path):
    cfg_path = _write(tmp_path, "neg", NEGATIVE)
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "out")]) == EXIT_OK
    run_dir = tmp_path / "out" / "neg"
    u = read_field(run_dir / "solution.field")
    assert np.max(np.abs(u.values + math.log(2))) <= 1e-8
    report = json.loads((run_dir / "report.json").read_text())
    assert report["classification"] == "converged" and report["exit_code"] == 0
    checks = json.loads((run_dir / "checks.json").read_text())
    assert [c["name"] for c in checks] == ["reference"] and checks[0]["pass"]
    logs = [json.loads(line) for line in (run_dir / "log.jsonl").read_text().splitlines()]
    assert logs and all({"iter", "residual", "stage"} <= set(rec) for rec in logs)
    assert sorted(os.listdir(tmp_path / "out")) == ["neg"]


def test_concentrating_drive_exits_2(tmp_path):
    cfg = parse_scenario(SCENARIOS / "expected" / "concentrating_drive.json")
    res = run_scenario(cfg, str(tmp_path))
    assert res.exit_code == EXIT_SOLVER
    assert res.classification == "blowup_low"
    report = json.loads((Path(res.directory) / "report.json").read_text())
    assert report["classification"] == "blowup_low" and report["exit_code"] == EXIT_SOLVER


def test_missing_field_file_exits_1(tmp_path, capsys):
    doc = _variant("missing", background={"type": "isotropic", "file": "nowhere.field"})
    cfg_path = _write(tmp_path, "missing", doc)
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "out")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "out" / "missing").exists()
    leftovers = list((tmp_path / "out").iterdir()) if (tmp_path / "out").exists() else []
    assert leftovers == []


def test_failing_check_exits_3(tmp_path):
    doc = _variant("wrongref", checks=[{"name": "reference", "expr": "0", "tol": 1e-8}])
    res = run_scenario(config_from_dict(doc, str(tmp_path)), str(tmp_path))
    assert res.exit_code == EXIT_CHECK
    assert res.checks[0]["pass"] is False


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CONFORMAL_WP_OUT", str(tmp_path / "env"))
    cfg_path = _write(tmp_path, "neg", NEGATIVE)
    assert main(["run", str(cfg_path)]) == EXIT_OK
    assert (tmp_path / "env" / "neg" / "solution.field").is_file()


def test_rerun_is_bit_identical(tmp_path):
    cfg = config_from_dict(_variant("det", initial={"expr": "0.1 * sin(2 * pi * x1)"}), str(tmp_path))
    first = run_scenario(cfg, str(tmp_path / "a"))
    second = run_scenario(cfg, str(tmp_path / "b"))
    for name in ("solution.field", "residual.field", "report.json", "checks.json"):
        assert (Path(first.directory) / name).read_bytes() == (Path(second.directory) / name).read_bytes()


# export-slice

def test_slice_of_constant(tmp_path):
    g = make_grid(3, [5, 6, 7], [1, 1, 1])
    src = tmp_path / "c.field"
    write_field(src, ScalarField.constant(g, 0.25))
    out = tmp_path / "c.csv"
    assert main(["export-slice", str(src), "--axis", "1", "--index", "2", "3", "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0] == "x1,x2,x3,value"
    assert len(rows) == 1 + 6
    assert {r.split(",")[-1] for r in rows[1:]} == {"0.25"}


def test_slice_of_model_sphere_matches_closed_form():
    g = make_grid(3, [21] * 3, 4.0, "box")
    u = model_sphere_solution(ModelSolutionSpec(3, 1, 2.0, 0.5), g)
    text = export_slice(u, 0, 10)
    rows = np.array([[float(v) for v in r.split(",")] for r in text.splitlines()[1:]])
    x = rows[:, 0]
    assert np.all(rows[:, 1:3] == 0.0)
    expected = np.log((0.25 + x**2) / (2 * 0.5))
    assert np.max(np.abs(rows[:, 3] - expected)) <= 1e-12
    assert np.all(np.diff(x) > 0)


def test_slice_errors(tmp_path):
    g = make_grid(2, [5, 5], 1.0)
    src = tmp_path / "c.field"
    write_field(src, ScalarField.constant(g, 1.0))
    with pytest.raises(ValueError):
        export_slice(ScalarField.constant(g, 1.0), 2, 0)
    with pytest.raises(ValueError):
        export_slice(ScalarField.constant(g, 1.0), 0, 9)
    assert main(["export-slice", str(src), "--axis", "3", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert not (tmp_path / "x.csv").exists()


# suite

def test_suite_of_trivial_scenarios(tmp_path, capsys):
    cfgs = tmp_path / "cfgs"
    cfgs.mkdir()
    _write(cfgs, "a", _variant("a"))
    _write(cfgs, "b", _variant("b", operator={"kind": "gp_exact", "p": 2},
                               checks=[{"name": "reference", "expr": "-0.5 * log(4)", "tol": 1e-8}]))
    _write(cfgs, "c", _variant("c", checks=["c0_bounds"]))
    assert main(["suite", str(cfgs), "--out", str(tmp_path / "out"), "--csv", str(tmp_path / "k.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "scenario" in out and out.count("PASS") == 3
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "scenario,check,measured,bound,pass" and len(lines) == 4


def test_suite_with_failing_check(tmp_path):
    cfgs = tmp_path / "cfgs"
    cfgs.mkdir()
    _write(cfgs, "a", _variant("a"))
    _write(cfgs, "z", _variant("z", checks=[{"name": "reference", "expr": "1", "tol": 1e-8}]))
    code, results = suite([str(cfgs)], str(tmp_path / "out"), threads=2)
    assert code == EXIT_CHECK
    assert [r.exit_code for r in results] == [EXIT_OK, EXIT_CHECK]
    assert "z,reference," in constants_csv(results)


def test_suite_of_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["suite", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == EXIT_USAGE


def test_worst_exit_order():
    assert worst_exit([]) == EXIT_USAGE
    assert worst_exit([0, 0]) == 0
    assert worst_exit([0, 2]) == 2
    assert worst_exit([2, 3, 0]) == 3
    assert worst_exit([3, 1, 2]) == 1


# check verb

def test_check_verb(tmp_path):
    cfg_path = _write(tmp_path, "neg", NEGATIVE)
    g = make_grid(3, [6] * 3, 1.0)
    good, bad = tmp_path / "good.field", tmp_path / "bad.field"
    write_field(good, ScalarField.constant(g, -math.log(2)))
    write_field(bad, ScalarField.constant(g, 0.0))
    assert main(["check", str(good), "--against", str(cfg_path)]) == EXIT_OK
    assert main(["check", str(bad), "--against", str(cfg_path)]) == EXIT_CHECK
    other = tmp_path / "other.field"
    write_field(other, ScalarField.constant(make_grid(3, [7] * 3, 1.0), 0.0))
    assert main(["check", str(other), "--against", str(cfg_path)]) == EXIT_USAGE


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["run"], ["run", "/nonexistent/x.json"], ["suite", "/nonexistent"],
    ["suite", ".", "--threads", "0"], ["export-slice", "/nonexistent.field", "--axis", "0", "--out", "x.csv"],
    ["check", "/nonexistent.field", "--against", "/nonexistent.json"],
])
def test_exit_codes_are_total(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "export-slice" in capsys.readouterr().out
