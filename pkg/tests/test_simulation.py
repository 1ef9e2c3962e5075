import csv
import io
import json
import math

import numpy as np
import pytest

from permiv.exceptions import ConfigError
from permiv.simulation import (
    Cell,
    SimDesign,
    design_from_dict,
    generate,
    preset,
    rejection_table,
)


def test_gamma_arithmetic():
    g = SimDesign("homoskedastic", 100, 5, 1, 4.0, "normal").Gamma
    np.testing.assert_allclose(g, np.full(5, math.sqrt(4 / 500)), rtol=1e-15)
    assert g[0] == pytest.approx(0.08944, abs=1e-5)
    assert not SimDesign("homoskedastic", 100, 5, 1, 0.0, "normal").Gamma.any()


def test_irrelevant_instruments_leave_Y_equal_to_V():
    data = generate(SimDesign("homoskedastic", 50, 3, 1, 0.0, "normal", seed=1), 0)
    # with Gamma = 0 and theta = 0: y = u and Y = rho u + sqrt(1 - rho^2) eps
    assert data.Y.shape == (50, 1) and data.W.shape == (50, 3)
    np.testing.assert_array_equal(data.X[:, 0], 1.0)


def test_normal_moments():
    n = 10_000
    data = generate(SimDesign("homoskedastic", n, 1, 1, 0.0, "normal", seed=9), 0)
    u, V = data.y, data.Y[:, 0]
    var_V = V.var()
    # Var of a sample variance of a unit normal is 2 / n
    assert abs(var_V - 1.0) <= 4 * math.sqrt(2 / n)
    r = np.corrcoef(u, V)[0, 1]
    assert abs(r - 0.5) <= 4 * (1 - 0.25) / math.sqrt(n)


def test_t5_component_variance_is_one():
    data = [generate(SimDesign("homoskedastic", 2000, 3, 2, 0.0, "t5", seed=4), r) for r in range(10)]
    W = np.vstack([d.W for d in data])
    np.testing.assert_allclose(W.var(axis=0), 1.0, atol=0.1)
    # one mixing draw per row: squared entries in the same row are correlated
    c = np.corrcoef(W[:, 0] ** 2, W[:, 1] ** 2)[0, 1]
    assert c > 0.1


def test_heteroskedastic_errors_scale_with_first_instrument():
    data = generate(SimDesign("heteroskedastic", 20_000, 2, 1, 0.0, "normal", seed=2), 0)
    u, w1 = data.y, data.W[:, 0]
    np.testing.assert_allclose(u.var(), 1.0, atol=0.06)
    assert np.corrcoef(u**2, w1**2)[0, 1] > 0.3


def test_generate_is_deterministic_and_rep_dependent():
    d = SimDesign("cauchy", 30, 2, 2, 4.0, seed=5)
    a, b, c = generate(d, 3), generate(d, 3), generate(d, 4)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)
    assert a.X.shape == (30, 2)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(family="gaussian", n=50, k=2),
        dict(family="homoskedastic", n=50, k=2),
        dict(family="homoskedastic", n=50, k=2, dist="cauchy"),
        dict(family="cauchy", n=50, k=2, dist="t5"),
        dict(family="cauchy", n=50, k=2, lam=-1.0),
        dict(family="cauchy", n=50, k=2, p=0),
    ],
)
def test_invalid_designs(kwargs):
    with pytest.raises(ConfigError):
        SimDesign(**kwargs)


def test_invalid_family_lists_valid_ones():
    with pytest.raises(ConfigError, match="cauchy, homoskedastic, heteroskedastic"):
        design_from_dict({"family": "laplace", "n": 50, "k": 2})


def test_rejection_table_preconditions():
    d = [SimDesign("homoskedastic", 50, 2, 1, 4.0, "normal")]
    with pytest.raises(ConfigError):
        rejection_table(d, ["AR"], reps=99)
    with pytest.raises(ConfigError):
        rejection_table(d, ["PAR1"], reps=100, n_perm=98)
    with pytest.raises(ConfigError):
        rejection_table(d, ["PNS"], reps=100, n_perm=99)


def test_mc_se_formula():
    c = Cell("x", "AR", rejections=37, reps=400, n_perm=99, dropped=0, failures=0)
    assert c.reject_rate == 37 / 400
    assert c.mc_se == pytest.approx(math.sqrt(0.0925 * 0.9075 / 400), rel=1e-15)
    assert not c.degenerate
    assert Cell("x", "AR", 0, 100, 99, dropped=500, failures=0).degenerate


@pytest.fixture(scope="module")
def small_table():
    designs = [SimDesign("homoskedastic", 40, 2, 1, 4.0, "normal"), SimDesign("cauchy", 40, 2, 1, 4.0)]
    return rejection_table(designs, ["AR", "par1", "PAR2"], reps=100, n_perm=99, seed=3)


def test_table_schema(small_table):
    rows = small_table.rows()
    assert len(rows) == 6
    for r in rows:
        assert 0.0 <= r["reject_rate"] <= 1.0
        assert r["mc_se"] == pytest.approx(math.sqrt(r["reject_rate"] * (1 - r["reject_rate"]) / r["reps"]))
        assert r["reps"] == 100 and r["n_perm"] == 99
    parsed = list(csv.DictReader(io.StringIO(small_table.to_csv())))
    assert [p["design_id"] for p in parsed] == [r["design_id"] for r in rows]
    assert {"design_id", "test", "reject_rate", "mc_se", "reps", "n_perm"} <= set(parsed[0])
    j = json.loads(small_table.to_json())
    assert j["seed"] == 3 and j["rows"] == rows
    assert small_table.get("cauchy-n40-k2-p1-lam4", "PAR1").reps == 100
    assert "PAR2" in small_table.to_text()


def test_table_reproducible_across_worker_counts(small_table):
    designs = [SimDesign("homoskedastic", 40, 2, 1, 4.0, "normal"), SimDesign("cauchy", 40, 2, 1, 4.0)]
    again = rejection_table(designs, ["AR", "PAR1", "PAR2"], reps=100, n_perm=99, seed=3, workers=3)
    assert again.to_json() == small_table.to_json()
    other = rejection_table(designs, ["AR", "PAR1", "PAR2"], reps=100, n_perm=99, seed=4)
    assert other.to_json() != small_table.to_json()


def test_presets():
    designs, tests = preset("table1")
    assert len(designs) == 4 and {d.family for d in designs} == {"cauchy"}
    assert {(d.n, d.k) for d in designs} == {(50, 5), (50, 10), (100, 5), (100, 10)}
    assert "PAR1" in tests and "AR" in tests
    d2, t2 = preset("table2")
    assert all(d.k == 1 and d.p == 1 for d in d2) and "PNS" in t2
    for name in ("table4", "table5", "table6"):
        ds, _ = preset(name)
        assert {d.family for d in ds} == {"heteroskedastic"}
    with pytest.raises(ConfigError):
        preset("table9")


@pytest.mark.slow
def test_level_property_at_n100():
    designs = [
        SimDesign("homoskedastic", 100, 5, 1, 4.0, "t5"),
        SimDesign("heteroskedastic", 100, 2, 1, 20.0, "normal"),
    ]
    table = rejection_table(designs, ["PAR1", "PAR2", "PLM"], reps=400, n_perm=199, seed=11)
    for c in table.cells:
        assert abs(c.reject_rate - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / c.reps) + 0.015, c.row()


@pytest.mark.slow
def test_exactness_in_cauchy_design():
    table = rejection_table([SimDesign("cauchy", 50, 5, 1, 4.0)], ["PAR1"], reps=400, n_perm=199, seed=12)
    c = table.cells[0]
    assert abs(c.reject_rate - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / c.reps)
