"""
Export functionality for simulation results.

This module contains functions to write runs and report tables to:
- CSV
- JSON
- Parquet
"""

from .csv import save_frame_to_csv, save_tables_to_csv
from .json import save_summary_to_json
from .parquet import save_frame_to_parquet

__all__ = [
    "save_frame_to_csv",
    "save_tables_to_csv",
    "save_summary_to_json",
    "save_frame_to_parquet",
]
