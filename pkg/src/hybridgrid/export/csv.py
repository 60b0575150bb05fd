#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CSV export functionality for simulation trajectories and report tables.
"""

import os
from typing import Dict, List, Optional

import polars as pl

from ..utils.io import PathLike, atomic_write


def save_frame_to_csv(frame: pl.DataFrame, path: PathLike) -> Optional[str]:
    """
    Save a table to a CSV file, one row per record, columns in frame order.

    Args:
        frame: Table to write
        path: Output file; ".csv" is appended when missing

    Returns:
        str: Path to the saved file, or None if saving failed
    """
    path = os.fspath(path)
    if not path.endswith(".csv"):
        path = f"{path}.csv"
    try:
        atomic_write(path, frame.write_csv)
    except OSError as e:
        print(f"❌ Error saving CSV file {path}: {e}")
        return None
    print(f"📄 {frame.height} rows written to {path}")
    return path


def save_tables_to_csv(tables: Dict[str, pl.DataFrame], directory: PathLike) -> List[str]:
    """
    Save named tables as <directory>/<name>.csv.

    Returns:
        List[str]: Paths written; tables that failed are left out
    """
    directory = os.fspath(directory)
    written = []
    for name, frame in tables.items():
        path = save_frame_to_csv(frame, os.path.join(directory, f"{name}.csv"))
        if path:
            written.append(path)
    return written
