import io
import json
import os
import time

import numpy as np
import pytest

from permiv import cli
from permiv.exceptions import EmptyGrid, ParseError
from permiv.inference import run_tests
from permiv.model import IVData
from permiv.permutation import PermutationPlan


def write_csv(path, cols):
    names = list(cols)
    n = len(cols[names[0]])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(cols[c][i])) for c in names) + "\n")


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def synthetic(rng, n, gamma, theta=1.0, k=2):
    w = rng.standard_normal((n, k))
    x = rng.standard_normal(n)
    u = rng.standard_normal(n)
    Y = w @ np.full(k, gamma) + 0.5 * u + rng.standard_normal(n) * 0.8
    y = theta * Y + 0.3 * x + u
    cols = {"y": y, "Y": Y, "x": x}
    cols.update({f"w{j}": w[:, j] for j in range(k)})
    return cols


@pytest.fixture
def toy(tmp_path):
    rng = np.random.default_rng(7)
    cols = {"y": rng.standard_normal(6), "Y": rng.standard_normal(6), "w": rng.standard_normal(6)}
    path = tmp_path / "toy.csv"
    write_csv(path, cols)
    return path, cols


BASE = ["--outcome", "y", "--endogenous", "Y", "--instruments", "w"]


def test_toy_matches_library_byte_for_byte(toy):
    path, cols = toy
    code, out, _ = run(["test", "--input", str(path), *BASE, "--theta0", "0.5", "--stats", "PAR2",
                        "--perms", "exhaustive", "--seed", "1"])
    assert code == 0
    data = IVData.from_arrays(cols["y"], cols["Y"], np.ones(6), cols["w"])
    res = run_tests(data, [0.5], ["PAR2"], plan=PermutationPlan(mode="exhaustive", seed=1))["PAR2"]
    expected = {
        "command": "test",
        "seed": 1,
        "alpha": 0.05,
        "theta0": [0.5],
        "results": [res.as_dict()],
    }
    assert out == json.dumps(expected, indent=2) + "\n"
    assert set(json.loads(out)["results"][0]) == {"statistic", "value", "p_value", "reject", "n_perm", "dropped"}
    assert json.loads(out)["results"][0]["n_perm"] == 720


def test_missing_column_names_it(toy):
    path, _ = toy
    with pytest.raises(ParseError) as exc:
        cli.read_csv(path, ["y", "income"])
    assert exc.value.column == "income" and "income" in str(exc.value)
    code, _, err = run(["test", "--input", str(path), "--outcome", "y", "--endogenous", "Y",
                        "--instruments", "income"])
    assert code == 2 and "income" in err


def test_non_numeric_cell_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,Y,w\n1,2,3\n4,abc,6\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        cli.read_csv(path, ["y", "Y", "w"])
    assert exc.value.line == 3 and exc.value.column == "Y"


def test_bad_alpha_and_roles(toy):
    path, _ = toy
    code, _, err = run(["test", "--input", str(path), *BASE, "--alpha", "1.5"])
    assert code == 2 and "alpha" in err
    code, _, err = run(["test", "--input", str(path), "--outcome", "y", "--endogenous", "Y",
                        "--instruments", "Y"])
    assert code == 2 and "more than one role" in err
    code, _, err = run(["test", "--input", str(path), *BASE, "--theta0", "0", "1"])
    assert code == 2
    code, _, err = run(["test", "--input", str(path.parent / "nope.csv"), *BASE])
    assert code == 2 and "not found" in err
    code, _, err = run(["test", "--input", str(path / "nope"), *BASE])
    assert code == 2 and "cannot access" in err


def test_seed_echo_reproduces(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "d.csv"
    write_csv(path, synthetic(rng, 40, 0.5))
    args = ["test", "--input", str(path), "--outcome", "y", "--endogenous", "Y", "--exogenous", "x",
            "--instruments", "w0,w1", "--theta0", "1", "--stats", "PAR1", "PAR2", "PLM", "--perms", "199"]
    code, out, _ = run(args)
    assert code == 0
    seed = json.loads(out)["seed"]
    assert isinstance(seed, int)
    _, again, _ = run(args + ["--seed", str(seed)])
    assert again == out


def test_json_round_trip_and_formats(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "d.csv"
    write_csv(path, synthetic(rng, 40, 0.5))
    args = ["test", "--input", str(path), "--outcome", "y", "--endogenous", "Y", "--instruments", "w0", "w1",
            "--stats", "AR,LM,CLRa", "PAR2", "--perms", "99", "--seed", "5"]
    _, out, _ = run(args)
    assert json.dumps(json.loads(out), indent=2) + "\n" == out
    _, csv_out, _ = run(args + ["--format", "csv"])
    lines = csv_out.splitlines()
    assert lines[0] == "statistic,value,p_value,reject,n_perm,dropped" and len(lines) == 5
    _, text, _ = run(args + ["--format", "text"])
    assert text.startswith("seed: 5")


def test_output_written_atomically(tmp_path):
    rng = np.random.default_rng(5)
    path = tmp_path / "d.csv"
    write_csv(path, synthetic(rng, 30, 0.5))
    target = tmp_path / "out"
    target.mkdir()
    dest = target / "report.json"
    args = ["test", "--input", str(path), "--outcome", "y", "--endogenous", "Y", "--instruments", "w0", "w1",
            "--stats", "AR", "--seed", "1"]
    code, stdout, _ = run(args + ["--output", str(dest)])
    assert code == 0 and stdout == ""
    _, direct, _ = run(args)
    assert dest.read_text(encoding="utf-8") == direct
    assert os.listdir(target) == ["report.json"]


def test_write_atomic_failure_leaves_target_untouched(tmp_path, monkeypatch):
    dest = tmp_path / "keep.txt"
    dest.write_text("old", encoding="utf-8")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(cli.os, "replace", boom)
    with pytest.raises(OSError):
        cli.write_atomic(str(dest), "new")
    assert dest.read_text(encoding="utf-8") == "old"
    assert os.listdir(tmp_path) == ["keep.txt"]


def test_ci_strong_identification(tmp_path):
    rng = np.random.default_rng(11)
    path = tmp_path / "strong.csv"
    write_csv(path, synthetic(rng, 200, 1.0, theta=1.0))
    code, out, _ = run(["ci", "--input", str(path), "--outcome", "y", "--endogenous", "Y", "--exogenous", "x",
                        "--instruments", "w0", "w1", "--stats", "PAR2", "AR", "--perms", "199", "--seed", "2",
                        "--grid-points", "101"])
    assert code == 0
    rep = json.loads(out)
    for s in ("PAR2", "AR"):
        cs = rep["confidence_sets"][s]
        assert not cs["unbounded_left"] and not cs["unbounded_right"]
        assert any(lo <= 1.0 <= hi for lo, hi in cs["intervals"])
        assert isinstance(cs["length"], float)
    assert rep["first_stage_f"][0] > 10
    assert 0.0 <= rep["breusch_pagan"]["y"] <= 1.0


def test_ci_irrelevant_instruments_unbounded(tmp_path):
    rng = np.random.default_rng(12)
    path = tmp_path / "weak.csv"
    write_csv(path, synthetic(rng, 100, 0.0, k=1))
    code, out, _ = run(["ci", "--input", str(path), "--outcome", "y", "--endogenous", "Y",
                        "--instruments", "w0", "--perms", "199", "--seed", "3", "--grid-points", "41",
                        "--format", "text"])
    assert code == 0
    assert "PAR2   (-inf, +inf)" in out
    assert "Breusch-Pagan" in out and "first-stage F" in out


def test_ci_empty_grid(tmp_path):
    rng = np.random.default_rng(13)
    path = tmp_path / "d.csv"
    write_csv(path, synthetic(rng, 30, 0.5))
    args = ["ci", "--input", str(path), "--outcome", "y", "--endogenous", "Y", "--instruments", "w0", "w1",
            "--grid-points", "0", "--stats", "AR"]
    code, _, err = run(args)
    assert code == 2 and "EmptyGrid" in err
    with pytest.raises(EmptyGrid):
        cli.cmd_ci(cli.config_from_args(cli.build_parser().parse_args(args)), io.StringIO())


def test_simulate_smoke_preset(tmp_path):
    dest = tmp_path / "table.csv"
    t0 = time.perf_counter()
    code, out, err = run(["simulate", "--preset", "smoke", "--reps", "100", "--perms", "99", "--seed", "8",
                          "--format", "csv", "--output", str(dest)])
    assert code == 0 and time.perf_counter() - t0 < 60
    assert out == "" and "seed 8" in err
    rows = dest.read_text(encoding="utf-8").splitlines()
    assert rows[0].startswith("design_id,test,reject_rate,mc_se,reps,n_perm") and len(rows) == 4


def test_simulate_json_round_trip_and_seed():
    args = ["simulate", "--family", "cauchy", "--n", "30", "--k", "2", "--reps", "100", "--perms", "99",
            "--seed", "4", "--stats", "AR,PAR1"]
    code, out, err = run(args)
    assert code == 0 and "seed 4" in err
    assert json.loads(out)["seed"] == 4
    assert json.dumps(json.loads(out), indent=2) + "\n" == out
    assert run(args)[1] == out


def test_simulate_invalid_family():
    code, _, err = run(["simulate", "--family", "laplace", "--reps", "100"])
    assert code == 2 and "cauchy, homoskedastic, heteroskedastic" in err
    code, _, err = run(["simulate", "--reps", "100"])
    assert code == 2
