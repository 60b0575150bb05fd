#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Shared fixtures for the hybridgrid tests.
"""

import os
import sys

import pytest

# Add the source and test directories to the path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import grids  # noqa: E402
from hybridgrid.loadflow import solve  # noqa: E402
from hybridgrid.network import load_network  # noqa: E402


@pytest.fixture
def toy():
    """Grid-connected toy: slack, IC in DC-voltage mode, one DC load bus."""
    return grids.grid_connected_toy()


@pytest.fixture
def toy_setpoints():
    return grids.grid_connected_setpoints()


@pytest.fixture
def toy_state(toy, toy_setpoints):
    return solve(toy, toy_setpoints).state


@pytest.fixture
def island():
    """Island toy: load bus, grid-forming IC, DC voltage source."""
    return grids.island_toy()


@pytest.fixture
def island_setpoints():
    return grids.island_setpoints()


@pytest.fixture
def island_state(island, island_setpoints):
    return solve(island, island_setpoints).state


@pytest.fixture(scope="session")
def cigre27():
    return load_network("cigre27")


@pytest.fixture(scope="session")
def cigre27_setpoints():
    return grids.cigre27_setpoints()


@pytest.fixture(scope="session")
def cigre27_state(cigre27, cigre27_setpoints):
    return solve(cigre27, cigre27_setpoints).state
