#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the report tables built from simulation trajectories.
"""

import json

import polars as pl
import pytest

from hybridgrid.errors import SchemaError
from hybridgrid.report import (
    build_tables,
    companion_path,
    read_run,
    report,
    solve_time_cdf,
)


def _run(currents=(10.0, 12.0, 18.0)):
    n = len(currents)
    return pl.DataFrame(
        {
            "time": [0.1 * i for i in range(n)],
            "state": ["grid_connected"] * n,
            "breaker_closed": [True] * n,
            "p_gcp_w": [1000.0] * n,
            "q_gcp_var": [100.0] * n,
            "p_IC1_w": [-500.0] * n,
            "q_IC1_var": [50.0] * n,
            "i_B10-B11_a": list(currents),
            "v_B01_v": [400.0] * n,
            "v_B22_v": [720.0] * n,
            "frequency_hz": [50.00231] * n,
            "angle_difference_deg": [0.0] * n,
            "soc": [0.5] * n,
        }
    )


def test_companion_path():
    assert companion_path("out/run.csv", "summary.json") == "out/run.summary.json"
    assert companion_path("run", "timing.csv") == "run.timing.csv"


def test_solve_time_cdf_is_monotone():
    cdf = solve_time_cdf(pl.DataFrame({"opf_solve_time_s": [0.03, 0.01, 0.02, 0.02]}))
    assert cdf["opf_solve_time_s"].to_list() == [0.01, 0.02, 0.02, 0.03]
    assert cdf["cumulative"].to_list() == [0.25, 0.5, 0.75, 1.0]


def test_tables_have_one_row_per_tick():
    run = _run()
    tables = build_tables(run, "B10-B11", 17.0, no_control=_run((11.0, 14.0, 20.0)))
    for name in ("gcp_power", "ic_power", "voltages", "angle_frequency", "soc", "line_current"):
        assert tables[name].height == run.height
    assert tables["ic_power"].columns == ["time", "p_IC1_w", "q_IC1_var"]
    assert tables["voltages"].columns == ["time", "v_B01_v", "v_B22_v"]
    line = tables["line_current"]
    assert line["current_no_control_a"].to_list() == [11.0, 14.0, 20.0]
    assert line["limit_a"].to_list() == [17.0] * 3
    assert tables["solve_time_cdf"].height == 0


def test_unknown_branch():
    with pytest.raises(SchemaError):
        build_tables(_run(), "B01-B02", 250.0)


def test_empty_run_gives_empty_tables():
    tables = build_tables(pl.DataFrame(), "B10-B11", 17.0)
    assert all(table.height == 0 for table in tables.values())


def test_read_run_checks_columns(tmp_path):
    path = tmp_path / "run.csv"
    _run().drop("soc").write_csv(str(path))
    with pytest.raises(SchemaError) as info:
        read_run(path)
    assert "soc" in str(info.value)


def test_report_uses_companion_files(tmp_path):
    run_path = tmp_path / "run.csv"
    _run().write_csv(str(run_path))
    summary = {"monitored_branch": "B10-B11", "monitored_limit_a": 17.0}
    (tmp_path / "run.summary.json").write_text(json.dumps(summary), encoding="utf-8")
    pl.DataFrame({"time": [0.0], "opf_solve_time_s": [0.05]}).write_csv(
        str(tmp_path / "run.timing.csv")
    )

    tables = report(run_path)
    assert tables["line_current"]["limit_a"].to_list() == [17.0] * 3
    assert tables["solve_time_cdf"]["cumulative"].to_list() == [1.0]


def test_report_needs_a_branch(tmp_path):
    run_path = tmp_path / "run.csv"
    _run().write_csv(str(run_path))
    with pytest.raises(SchemaError):
        report(run_path)
