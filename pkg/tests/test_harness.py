import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gformula import harness
from gformula.harness import (
    Cell, StudyConfig, cell_metrics, replicate_table, report_csv, run_cell, run_study, table_cells,
)

TINY = dict(M=4, S=10, C=60, B=40)


def tiny_config(cells, seed=3, workers=1):
    return StudyConfig("time_varying", tuple(cells), TINY["M"], TINY["S"], TINY["C"], TINY["B"],
                       base_seed=seed, workers=workers)


def test_perfect_estimator_metrics():
    m = cell_metrics(0.2, [0.2] * 5, [0.05] * 5)
    assert m["mean_bias"] == 0 and m["sd_bias"] == 0 and m["mse"] == 0 and m["coverage"] == 1


def test_offset_estimator_metrics():
    m = cell_metrics(0.2, [0.3] * 5, [0.1] * 5)
    assert m["mean_bias"] == pytest.approx(-0.1)
    assert m["mse"] == pytest.approx(0.01)
    assert m["coverage"] == 1.0
    assert m["mse_table"] == pytest.approx(0.01 + 0.01)


@settings(max_examples=60)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=60), st.floats(-0.5, 0.5))
def test_mse_identity_and_bounds(est, truth):
    se = np.abs(np.asarray(est)) / 3
    m = cell_metrics(truth, est, se)
    errors = truth - np.asarray(est)
    assert m["mse"] == pytest.approx(np.mean(errors**2), abs=1e-12)
    assert m["mse"] >= m["mean_bias"] ** 2 - 1e-12
    assert 0.0 <= m["coverage"] <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        StudyConfig("time_varying", (Cell("time_varying", 20, 0.0),), 1, 10, 10, 10)
    with pytest.raises(ValueError):
        StudyConfig("time_varying", (), 5, 10, 10, 10)
    with pytest.raises(ValueError):
        table_cells(3)


def test_grids():
    t1 = table_cells(1)
    assert [(c.rho, c.true_rd) for c in t1] == [(r, d) for r in (0.4, 0.8, 0.9, 0.98) for d in (0.0, 0.2)]
    assert {c.n for c in t1} == {harness.TIME_FIXED_N}
    t2 = table_cells(2)
    assert [(c.n, c.true_rd) for c in t2] == [(n, d) for n in (20, 60, 100) for d in (0.0, 0.2)]
    assert harness.SCALES["desk"] == {"M": 200, "S": 200, "C": 2000, "B": 500}
    assert harness.SCALES["full"] == {"M": 1000, "S": 1000, "C": 10000, "B": 1000}


def test_cell_keys_are_distinct_and_non_negative():
    keys = [c.key for c in table_cells(1) + table_cells(2)]
    assert len(set(keys)) == len(keys)
    assert all(k >= 0 for key in keys for k in key)


def test_run_cell_rows_and_invariants():
    rows = run_cell(Cell("time_varying", 20, 0.2), tiny_config([Cell("time_varying", 20, 0.2)]))
    std, bay = rows
    assert (std.method, bay.method) == ("Standard", "Bayes")
    assert std.mse_ratio == 1.0 and std.mse_table_ratio == 1.0
    assert bay.mse_ratio == pytest.approx(bay.mse / std.mse)
    for r in rows:
        assert 0 <= r.coverage <= 1
        assert r.mse >= r.mean_bias**2 - 1e-12
        assert 0 <= r.divergence_fraction <= 1


def test_replicate_failure_aborts_the_cell(monkeypatch):
    real = harness.run_replicate

    def flaky(cell, config, m):
        if m == 3:
            raise RuntimeError("replicate 3 failed")
        return real(cell, config, m)

    monkeypatch.setattr(harness, "run_replicate", flaky)
    with pytest.raises(RuntimeError, match="replicate 3"):
        run_cell(Cell("time_varying", 20, 0.0), tiny_config([Cell("time_varying", 20, 0.0)]))


def test_report_is_byte_identical_across_runs_and_workers():
    cells = [Cell("time_varying", 20, 0.0), Cell("time_varying", 60, 0.2)]
    a = report_csv(run_study(tiny_config(cells), 2))
    b = report_csv(run_study(tiny_config(cells), 2))
    c = report_csv(run_study(tiny_config(cells, workers=2), 2))
    assert a == b == c
    d = report_csv(run_study(tiny_config(cells, seed=4), 2))
    assert a != d


def test_report_header(tmp_path):
    rep = replicate_table(2, "desk", tmp_path, seed=5, cells=[Cell("time_varying", 20, 0.0)], **TINY)
    text = (tmp_path / "table2_desk.csv").read_text()
    meta = [ln for ln in text.splitlines() if ln.startswith("#")]
    assert "# seed=5" in meta and "# scale=desk" in meta and "# M=4" in meta
    assert any(ln.startswith("# bias_sign=bias = true_rd - estimate") for ln in meta)
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert body[0].startswith("method,N,n,true_rd,mean_bias,sd_bias,mse,coverage,mse_ratio")
    assert len(body) == 3
    assert (tmp_path / "table2_desk.timing.csv").exists()
    assert rep.row("Bayes", n=20).method == "Bayes"


def test_time_fixed_cell_runs():
    cell = Cell("time_fixed", 30, 0.0, 0.9)
    cfg = StudyConfig("time_fixed", (cell,), 3, 10, 60, 40, base_seed=1)
    rows = run_cell(cell, cfg)
    text = report_csv(harness.SimReport(1, cfg, rows))
    assert "\nStandard,0.9,30,0.00," in text
