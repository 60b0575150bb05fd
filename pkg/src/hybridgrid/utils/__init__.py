"""
Utility functions for hybridgrid.

This module contains helpers used across the package:
- atomic file writing and JSON reading
- phasor and angle arithmetic
- log configuration
"""

from .io import atomic_write_text, read_json, require
from .log import configure_logging
from .phasor import polar_to_complex, wrap_angle_deg

__all__ = [
    "atomic_write_text",
    "read_json",
    "require",
    "configure_logging",
    "polar_to_complex",
    "wrap_angle_deg",
]
