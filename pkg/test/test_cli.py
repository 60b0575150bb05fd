#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the hybridgrid command-line interface.
"""

import json
import os

import polars as pl

import grids
from hybridgrid.cli import main


def _write_setpoints(tmp_path):
    path = tmp_path / "setpoints.json"
    path.write_text(json.dumps(grids.cigre27_setpoints().to_dict()), encoding="utf-8")
    return str(path)


def test_version():
    assert main(["--version"]) == 0


def test_missing_command():
    assert main([]) == 2


def test_validate_bundled_network(capsys):
    assert main(["validate", "cigre27"]) == 0
    assert "21 AC buses, 6 DC buses" in capsys.readouterr().out


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "absent.json")]) == 1


def test_loadflow_then_sc(tmp_path, capsys):
    state_path = str(tmp_path / "state.json")
    assert main(["loadflow", "cigre27", _write_setpoints(tmp_path), "-o", state_path]) == 0
    assert "Converged" in capsys.readouterr().out
    with open(state_path, encoding="utf-8") as f:
        data = json.load(f)
    assert len(data["state"]["ac"]) == 21
    assert len(data["state"]["dc"]) == 6

    sc_path = str(tmp_path / "sc.json")
    assert main(["sc", "cigre27", state_path, "--check-fd", "-o", sc_path]) == 0
    with open(sc_path, encoding="utf-8") as f:
        coefficients = json.load(f)
    assert len(coefficients["voltage"]) == 27
    assert len(coefficients["voltage"][0]) == len(coefficients["controls"])


def test_loadflow_rejects_incomplete_setpoints(tmp_path):
    path = tmp_path / "setpoints.json"
    path.write_text(json.dumps({"p": {"17": -0.1}}), encoding="utf-8")
    assert main(["loadflow", "cigre27", str(path)]) == 1


def test_opf_step(tmp_path):
    out = str(tmp_path / "opf.json")
    assert main(["opf", "cigre27", "-o", out]) == 0
    with open(out, encoding="utf-8") as f:
        solution = json.load(f)
    assert solution["status"].startswith("optimal")
    assert "w2_losses" in solution["terms"]


def test_opf_prepare_step_reports_the_island_look_ahead(tmp_path):
    out = str(tmp_path / "prepare.json")
    assert main(["opf", "cigre27", "--op-state", "prepare_for_island", "-o", out]) == 0
    with open(out, encoding="utf-8") as f:
        solution = json.load(f)
    assert solution["island_objective"] is not None
    assert "w9_gcp_p" in solution["terms"]


def test_simulate_then_report(tmp_path):
    run_path = str(tmp_path / "run.csv")
    assert main(["simulate", "cigre27", "--duration", "1", "--no-control", "-o", run_path]) == 0
    assert os.path.exists(str(tmp_path / "run.summary.json"))
    assert os.path.exists(str(tmp_path / "run.timing.csv"))
    assert pl.read_csv(run_path).height == 10

    assert main(["report", run_path]) == 0
    report_dir = tmp_path / "run.report"
    line = pl.read_csv(str(report_dir / "line_current.csv"))
    assert line.columns == ["time", "current_a", "limit_a"]
    assert line["limit_a"].to_list() == [17.0] * 10
    assert (report_dir / "solve_time_cdf.csv").exists()


def test_simulate_duration_past_profiles(tmp_path):
    run_path = str(tmp_path / "run.csv")
    assert main(["simulate", "cigre27", "--duration", "601", "-o", run_path]) == 1
    assert not os.path.exists(run_path)
