#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Parquet export functionality for simulation trajectories.
"""

import os
from typing import Optional

import polars as pl

from ..utils.io import PathLike, atomic_write


def save_frame_to_parquet(frame: pl.DataFrame, path: PathLike) -> Optional[str]:
    """
    Save a table to a Parquet file.

    Args:
        frame: Table to write
        path: Output file; ".parquet" is appended when missing

    Returns:
        str: Path to the saved file, or None if saving failed
    """
    path = os.fspath(path)
    if not path.endswith(".parquet"):
        path = f"{path}.parquet"
    try:
        atomic_write(path, frame.write_parquet)
    except OSError as e:
        print(f"❌ Error saving Parquet file {path}: {e}")
        return None
    print(f"📄 {frame.height} rows written to {path}")
    return path
