#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Small hand-built grids used across the tests.

Bases are 100 kW, 400 V AC and 800 V DC, like the bundled network.
"""

from hybridgrid.converter import LossParams
from hybridgrid.loadflow import SetpointSet
from hybridgrid.network import (
    Branch,
    Bus,
    BusKind,
    BusRole,
    IcLink,
    IcMode,
    NetworkModel,
    PerUnitBase,
)

BASE = PerUnitBase(100e3, 400.0, 800.0)

LOSSES = LossParams(v0=0.0026, r0=0.0028, u=0.0059, v=0.0903, w=1.1e-4, e_nom=0.833)

AC_LINE = 1.0 / complex(0.01, 0.02)
DC_LINE = complex(100.0, 0.0)


def _ac(bus_id: int, role: BusRole, name: str) -> Bus:
    return Bus(bus_id, BusKind.AC, role, 360.0, 440.0, name)


def _dc(bus_id: int, role: BusRole, name: str) -> Bus:
    return Bus(bus_id, BusKind.DC, role, 680.0, 760.0, name)


def grid_connected_toy(
    ampacity: float = float("inf"), mode: IcMode = IcMode.VOLTAGE
) -> NetworkModel:
    """
    0 slack -- 1 IC AC terminal | IC1 | 2 IC DC terminal -- 3 DC_P
    """
    ac_role, dc_role = mode.roles
    buses = (
        _ac(0, BusRole.AC_SLACK, "grid"),
        _ac(1, ac_role, "ic_ac"),
        _dc(2, dc_role, "ic_dc"),
        _dc(3, BusRole.DC_P, "dc_load"),
    )
    branches = (
        Branch(0, 1, AC_LINE, ampacity=ampacity, name="feeder"),
        Branch(2, 3, DC_LINE, name="dc_cable"),
    )
    links = (IcLink("IC1", 1, 2, 45000.0, LOSSES, mode),)
    return NetworkModel(buses, branches, links, BASE)


def grid_connected_setpoints(p_dc: float = 0.05) -> SetpointSet:
    return SetpointSet(
        p={3: p_dc},
        q={1: 0.0},
        vmag={0: 1.0},
        vangle={0: 0.0},
        vdc={2: 0.9},
    )


def island_toy() -> NetworkModel:
    """
    0 load -- 1 forming IC AC terminal | IC1 | 2 forming DC terminal -- 3 DC_V source
    """
    buses = (
        _ac(0, BusRole.AC_PQ, "load"),
        _ac(1, BusRole.IC_AC_FORMING, "ic_ac"),
        _dc(2, BusRole.IC_DC_FORMING, "ic_dc"),
        _dc(3, BusRole.DC_V, "storage"),
    )
    branches = (
        Branch(0, 1, AC_LINE, name="feeder"),
        Branch(2, 3, DC_LINE, name="dc_cable"),
    )
    links = (IcLink("IC1", 1, 2, 45000.0, LOSSES, IcMode.FORMING),)
    return NetworkModel(buses, branches, links, BASE)


def island_setpoints() -> SetpointSet:
    return SetpointSet(
        p={0: -0.05},
        q={0: -0.01},
        vmag={1: 1.0},
        vangle={1: 0.0},
        vdc={3: 0.9},
    )


def cigre27_setpoints(load: float = 1.0, vdc: float = 0.9) -> SetpointSet:
    """Loaded operating point of the bundled network with current through every IC."""
    return SetpointSet(
        p={17: -0.1 * load, 14: 0.02, 19: 0.05, 20: -0.04, 25: 0.03, 26: -0.02},
        q={17: -0.03 * load, 18: 0.01, 19: 0.01, 20: -0.01},
        vmag={0: 1.0},
        vangle={0: 0.0},
        vdc={21: vdc},
    )


def cigre27_island(model: NetworkModel) -> NetworkModel:
    """The bundled network islanded: IC1 forming, the storage at B25 holding the DC voltage."""
    return model.with_link_mode("IC1", IcMode.FORMING).with_roles(
        {0: BusRole.AC_PQ, 24: BusRole.DC_V}
    )


def cigre27_island_setpoints(load: float = 1.0, vmag: float = 1.0) -> SetpointSet:
    return SetpointSet(
        p={17: -0.1 * load, 14: 0.02, 19: 0.05, 20: -0.04, 25: 0.03, 26: -0.02},
        q={17: -0.03 * load, 19: 0.01, 20: -0.01},
        vmag={18: vmag},
        vangle={18: 0.0},
        vdc={24: 0.9},
    )
