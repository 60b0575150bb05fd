#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Phasor helpers.
"""

import math


def wrap_angle_deg(angle: float) -> float:
    """
    Wrap an angle in degrees to the interval (-180, 180].

    Args:
        angle: Angle in degrees

    Returns:
        float: Equivalent angle in (-180, 180]
    """
    wrapped = math.fmod(angle, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def polar_to_complex(magnitude: float, angle_rad: float) -> complex:
    return complex(magnitude * math.cos(angle_rad), magnitude * math.sin(angle_rad))

