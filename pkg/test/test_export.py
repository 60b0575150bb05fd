#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the CSV, JSON and Parquet writers.
"""

import json
import math
import os

import polars as pl
from polars.testing import assert_frame_equal

from hybridgrid.export import (
    save_frame_to_csv,
    save_frame_to_parquet,
    save_summary_to_json,
    save_tables_to_csv,
)


def _frame():
    return pl.DataFrame({"time": [0.0, 0.1], "soc": [0.5, 0.49], "state": ["a", "b"]})


def test_csv_appends_extension(tmp_path):
    path = save_frame_to_csv(_frame(), tmp_path / "run")
    assert path == str(tmp_path / "run.csv")
    assert_frame_equal(pl.read_csv(path), _frame())


def test_csv_creates_directories(tmp_path):
    path = save_frame_to_csv(_frame(), tmp_path / "nested" / "dir" / "run.csv")
    assert os.path.exists(path)
    assert not [f for f in os.listdir(tmp_path / "nested" / "dir") if f.startswith(".tmp-")]


def test_tables_to_csv(tmp_path):
    written = save_tables_to_csv({"a": _frame(), "b": _frame().head(1)}, tmp_path / "out")
    assert sorted(os.path.basename(p) for p in written) == ["a.csv", "b.csv"]


def test_parquet(tmp_path):
    path = save_frame_to_parquet(_frame(), tmp_path / "run")
    assert path.endswith(".parquet")
    assert_frame_equal(pl.read_parquet(path), _frame())


def test_summary_replaces_non_finite(tmp_path):
    path = save_summary_to_json(
        {"limit": math.inf, "values": [1.0, math.nan], "nested": {"x": -math.inf}},
        tmp_path / "summary.json",
    )
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    assert data == {"limit": None, "values": [1.0, None], "nested": {"x": None}}


def test_summary_failure_returns_none(tmp_path, capsys):
    assert save_summary_to_json({"bad": object()}, tmp_path / "summary.json") is None
    assert "❌" in capsys.readouterr().out
    assert not os.path.exists(tmp_path / "summary.json")
