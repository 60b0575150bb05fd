#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
JSON export functionality for run summaries.
"""

import json
import math
from typing import Any, Dict, Optional

from ..utils.io import PathLike, atomic_write_text


def _finite(value: Any) -> Any:
    """Replace non-finite floats by None so the output stays valid JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def save_summary_to_json(summary: Dict[str, Any], path: PathLike) -> Optional[str]:
    """
    Save a summary dictionary to a JSON file.

    Args:
        summary: JSON-compatible dictionary
        path: Output file

    Returns:
        str: Path to the saved file, or None if saving failed
    """
    try:
        text = json.dumps(_finite(summary), indent=2, ensure_ascii=False)
        written = atomic_write_text(path, text + "\n")
    except (OSError, TypeError, ValueError) as e:
        print(f"❌ Error saving JSON summary: {e}")
        return None
    print(f"📄 Summary written to {written}")
    return written
