#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Report tables

This module turns a simulation trajectory into one tidy table per plotted
quantity (GCP power, IC powers, monitored line current against its limit,
voltages, angle and frequency, SoC, OPF solve-time CDF). Rendering is left
to external tools.
"""

import logging
import os
from typing import Dict, Optional

import polars as pl

from .errors import SchemaError
from .utils.io import PathLike, read_json

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "time",
    "state",
    "p_gcp_w",
    "q_gcp_var",
    "frequency_hz",
    "angle_difference_deg",
    "soc",
)


def companion_path(run_path: PathLike, suffix: str) -> str:
    """<stem>.<suffix> next to a run file, e.g. run.csv -> run.summary.json."""
    stem, _ = os.path.splitext(os.fspath(run_path))
    return f"{stem}.{suffix}"


def read_run(path: PathLike) -> pl.DataFrame:
    """
    Read a trajectory written by `simulate`.

    Raises:
        SchemaError: if a required column is missing
    """
    path = os.fspath(path)
    if os.path.getsize(path) == 0:
        return pl.DataFrame()
    if path.endswith(".parquet"):
        frame = pl.read_parquet(path)
    else:
        try:
            frame = pl.read_csv(path)
        except pl.exceptions.NoDataError:
            return pl.DataFrame()
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(path, f"missing columns {', '.join(missing)}")
    return frame


def solve_time_cdf(timings: pl.DataFrame) -> pl.DataFrame:
    """Empirical CDF of the OPF solve times; the cumulative column never decreases."""
    times = timings.get_column("opf_solve_time_s").cast(pl.Float64).sort()
    n = len(times)
    return pl.DataFrame(
        {
            "opf_solve_time_s": times,
            "cumulative": [(i + 1) / n for i in range(n)],
        },
        schema={"opf_solve_time_s": pl.Float64, "cumulative": pl.Float64},
    )


def _select(frame: pl.DataFrame, prefix: str, suffixes=("",)) -> pl.DataFrame:
    if frame.width == 0:
        return pl.DataFrame({"time": []}, schema={"time": pl.Float64})
    columns = [
        c for c in frame.columns if c.startswith(prefix) and any(c.endswith(s) for s in suffixes)
    ]
    return frame.select(["time", *columns])


def line_current_table(
    run: pl.DataFrame,
    branch: str,
    limit: Optional[float],
    no_control: Optional[pl.DataFrame] = None,
) -> pl.DataFrame:
    """Monitored line current with its limit, plus the no-control series when given."""
    column = f"i_{branch}_a"
    if run.width == 0:
        return pl.DataFrame(
            {"time": [], "current_a": [], "limit_a": []},
            schema={"time": pl.Float64, "current_a": pl.Float64, "limit_a": pl.Float64},
        )
    if column not in run.columns:
        raise SchemaError(column, "monitored branch not in the run")
    table = run.select(
        pl.col("time"),
        pl.col(column).alias("current_a"),
        pl.lit(limit, dtype=pl.Float64).alias("limit_a"),
    )
    if no_control is not None and no_control.width:
        other = no_control.select(pl.col("time"), pl.col(column).alias("current_no_control_a"))
        table = table.join(other, on="time", how="left")
    return table


def build_tables(
    run: pl.DataFrame,
    branch: str,
    limit: Optional[float] = None,
    no_control: Optional[pl.DataFrame] = None,
    timings: Optional[pl.DataFrame] = None,
) -> Dict[str, pl.DataFrame]:
    """
    Report tables for one run.

    Args:
        run: Trajectory of the controlled run
        branch: Label of the monitored branch
        limit: Ampacity of the monitored branch (A)
        no_control: Trajectory of the no-control run, if any
        timings: OPF solve times, if any

    Returns:
        Dict[str, pl.DataFrame]: Table name -> table; every table has one row per tick
            except the solve-time CDF
    """
    if run.width == 0:
        time = pl.DataFrame({"time": []}, schema={"time": pl.Float64})
        names = ("gcp_power", "ic_power", "voltages", "angle_frequency", "soc")
        tables = {name: time for name in names}
    else:
        ic_p = _select(run, "p_", ("_w",)).drop("p_gcp_w")
        ic_q = _select(run, "q_", ("_var",)).drop("q_gcp_var")
        tables = {
            "gcp_power": run.select("time", "p_gcp_w", "q_gcp_var"),
            "ic_power": ic_p.join(ic_q, on="time", how="left"),
            "voltages": _select(run, "v_", ("_v",)),
            "angle_frequency": run.select("time", "frequency_hz", "angle_difference_deg", "state"),
            "soc": run.select("time", "soc"),
        }
    tables["line_current"] = line_current_table(run, branch, limit, no_control)
    if timings is None:
        timings = pl.DataFrame({"opf_solve_time_s": []}, schema={"opf_solve_time_s": pl.Float64})
    tables["solve_time_cdf"] = solve_time_cdf(timings)
    return tables


def report(
    run_path: PathLike,
    no_control_path: Optional[PathLike] = None,
    timing_path: Optional[PathLike] = None,
    branch: Optional[str] = None,
    limit: Optional[float] = None,
) -> Dict[str, pl.DataFrame]:
    """
    Build report tables from run files.

    The summary (<stem>.summary.json) and timing (<stem>.timing.csv) files
    written next to the run are picked up when present.

    Args:
        run_path: Controlled run trajectory (CSV or Parquet)
        no_control_path: No-control run trajectory
        timing_path: OPF solve-time file; defaults to the companion file
        branch: Monitored branch; defaults to the one named in the summary
        limit: Limit of the monitored branch (A); defaults to the summary value

    Raises:
        SchemaError: if a run file or the summary does not match the layout
    """
    run = read_run(run_path)
    summary_path = companion_path(run_path, "summary.json")
    if os.path.exists(summary_path):
        summary = read_json(summary_path)
        branch = branch or summary.get("monitored_branch")
        limit = limit if limit is not None else summary.get("monitored_limit_a")
    if not branch:
        raise SchemaError(os.fspath(run_path), "no monitored branch given or found in the summary")

    no_control = read_run(no_control_path) if no_control_path else None
    timing_path = timing_path or companion_path(run_path, "timing.csv")
    timings = None
    if os.path.exists(timing_path) and os.path.getsize(timing_path) > 0:
        timings = pl.read_csv(timing_path)
        if "opf_solve_time_s" not in timings.columns:
            raise SchemaError(os.fspath(timing_path), "missing column opf_solve_time_s")
        timings = timings.with_columns(pl.col("opf_solve_time_s").cast(pl.Float64))
    tables = build_tables(run, branch, limit, no_control, timings)
    logger.info("report tables for %s: %s", run_path, ", ".join(tables))
    return tables
