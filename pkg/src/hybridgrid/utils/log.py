#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Log configuration for the command line.

Library modules only create loggers; the level and handler are installed here,
driven by the HYBRIDGRID_LOG environment variable (error|warn|info|debug).
"""

import logging
import os
import sys
from typing import Optional

LOG_ENV_VAR = "HYBRIDGRID_LOG"

LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def configure_logging(level: Optional[str] = None) -> int:
    """
    Install a stderr handler on the hybridgrid logger.

    Args:
        level: Level name; falls back to HYBRIDGRID_LOG, then "warn"

    Returns:
        int: The numeric level installed
    """
    name = (level or os.environ.get(LOG_ENV_VAR) or "warn").strip().lower()
    numeric = LEVELS.get(name, logging.WARNING)
    root = logging.getLogger("hybridgrid")
    root.setLevel(numeric)
    if not any(getattr(h, "_hybridgrid", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._hybridgrid = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    return numeric
