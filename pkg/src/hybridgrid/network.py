#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Hybrid AC/DC network model

This module describes the buses, branches and interfacing converters (ICs) of
a hybrid microgrid, assembles the AC admittance and DC conductance matrices,
validates the role assignment and embeds converter filters.

Bus ids are dense: AC buses take 0..n_ac-1 and DC buses n_ac..n-1. Series and
shunt admittances are per unit; voltage and ampacity limits are kept in
physical units (V, A) and converted through the model's PerUnitBase.
"""

import logging
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .converter import LossParams
from .errors import (
    DisconnectedGridError,
    DuplicateBranchError,
    FilterError,
    ModelValidationError,
    ParameterError,
    SchemaError,
)
from .utils.io import read_json, require

logger = logging.getLogger(__name__)


class BusKind(str, Enum):
    AC = "ac"
    DC = "dc"


class BusRole(str, Enum):
    """Load flow role of a bus."""

    AC_SLACK = "ac_slack"
    AC_PQ = "ac_pq"
    AC_PV = "ac_pv"
    IC_AC_POWER = "ic_ac_power"
    IC_AC_VOLTAGE = "ic_ac_voltage"
    IC_AC_FORMING = "ic_ac_forming"
    IC_DC_POWER = "ic_dc_power"
    IC_DC_VOLTAGE = "ic_dc_voltage"
    IC_DC_FORMING = "ic_dc_forming"
    DC_P = "dc_p"
    DC_V = "dc_v"

    @property
    def kind(self) -> BusKind:
        if self in (BusRole.DC_P, BusRole.DC_V) or self.name.startswith("IC_DC"):
            return BusKind.DC
        return BusKind.AC

    @property
    def is_ic(self) -> bool:
        return self.name.startswith("IC_")


class IcMode(str, Enum):
    """
    Control mode of an interfacing converter.

    POWER follows P and Q setpoints, VOLTAGE holds the DC voltage and Q,
    FORMING imposes the AC voltage phasor.
    """

    POWER = "pq"
    VOLTAGE = "vdc_q"
    FORMING = "vv"

    @property
    def roles(self) -> Tuple[BusRole, BusRole]:
        return IC_MODE_ROLES[self]


IC_MODE_ROLES: Dict[IcMode, Tuple[BusRole, BusRole]] = {
    IcMode.POWER: (BusRole.IC_AC_POWER, BusRole.IC_DC_POWER),
    IcMode.VOLTAGE: (BusRole.IC_AC_VOLTAGE, BusRole.IC_DC_VOLTAGE),
    IcMode.FORMING: (BusRole.IC_AC_FORMING, BusRole.IC_DC_FORMING),
}


@dataclass(frozen=True)
class PerUnitBase:
    """
    Per-unit bases.

    Attributes:
        base_power: Three-phase base power (W)
        base_voltage_ac: AC line-to-line base voltage (V)
        base_voltage_dc: DC base voltage (V)
    """

    base_power: float
    base_voltage_ac: float
    base_voltage_dc: float

    def __post_init__(self) -> None:
        if min(self.base_power, self.base_voltage_ac, self.base_voltage_dc) <= 0.0:
            raise ParameterError("per-unit bases must be strictly positive")

    def base_voltage(self, kind: BusKind) -> float:
        return self.base_voltage_ac if kind is BusKind.AC else self.base_voltage_dc

    def base_current(self, kind: BusKind) -> float:
        if kind is BusKind.AC:
            return self.base_power / (math.sqrt(3.0) * self.base_voltage_ac)
        return self.base_power / self.base_voltage_dc

    def base_impedance(self, kind: BusKind) -> float:
        return self.base_voltage(kind) ** 2 / self.base_power

    def power_to_pu(self, watts: float) -> float:
        return watts / self.base_power

    def power_to_si(self, pu: float) -> float:
        return pu * self.base_power

    def voltage_to_pu(self, volts: float, kind: BusKind) -> float:
        return volts / self.base_voltage(kind)

    def voltage_to_si(self, pu: float, kind: BusKind) -> float:
        return pu * self.base_voltage(kind)

    def current_to_pu(self, amps: float, kind: BusKind) -> float:
        return amps / self.base_current(kind)

    def current_to_si(self, pu: float, kind: BusKind) -> float:
        return pu * self.base_current(kind)

    def impedance_to_pu(self, ohms: complex, kind: BusKind) -> complex:
        return ohms / self.base_impedance(kind)


@dataclass(frozen=True)
class Bus:
    """A network node; vmin and vmax are in volts (line-to-line for AC)."""

    id: int
    kind: BusKind
    role: BusRole
    vmin: float
    vmax: float
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"bus{self.id}"


@dataclass(frozen=True)
class Branch:
    """
    A line or cable between two buses of the same kind.

    Attributes:
        from_bus: Sending bus id
        to_bus: Receiving bus id
        series_admittance: Series admittance (p.u.)
        shunt_from: Shunt admittance at the sending end (p.u.)
        shunt_to: Shunt admittance at the receiving end (p.u.)
        ampacity: Current limit (A)
        name: Display name
        aggregate: Allows parallel branches between the same pair of buses
    """

    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_from: complex = 0j
    shunt_to: complex = 0j
    ampacity: float = math.inf
    name: str = ""
    aggregate: bool = False

    @property
    def label(self) -> str:
        return self.name or f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class FilterParams:
    """Series (r1 + jx1), shunt susceptance b and series (r2 + jx2), in ohm and siemens."""

    r1: float = 0.0
    x1: float = 0.0
    b: float = 0.0
    r2: float = 0.0
    x2: float = 0.0

    def is_passive(self) -> bool:
        return min(self.r1, self.x1, self.b, self.r2, self.x2) >= 0.0

    def is_empty(self) -> bool:
        return self.r1 == self.x1 == self.b == self.r2 == self.x2 == 0.0


@dataclass(frozen=True)
class IcLink:
    """
    An interfacing converter between an AC bus and a DC bus.

    Attributes:
        name: Converter name
        ac_bus: AC terminal bus id
        dc_bus: DC terminal bus id
        rating: Apparent power rating (VA)
        loss_params: Loss coefficients
        mode: Control mode
        filter: Optional output filter, embedded with embed_filter
    """

    name: str
    ac_bus: int
    dc_bus: int
    rating: float
    loss_params: LossParams
    mode: IcMode = IcMode.POWER
    filter: Optional[FilterParams] = None


@dataclass(frozen=True)
class NetworkModel:
    """Immutable description of the hybrid grid."""

    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    ic_links: Tuple[IcLink, ...]
    base: PerUnitBase

    @property
    def n_ac(self) -> int:
        return sum(1 for b in self.buses if b.kind is BusKind.AC)

    @property
    def n_dc(self) -> int:
        return len(self.buses) - self.n_ac

    @property
    def ac_buses(self) -> Tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.kind is BusKind.AC)

    @property
    def dc_buses(self) -> Tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.kind is BusKind.DC)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[bus_id]

    def bus_by_name(self, name: str) -> Bus:
        for b in self.buses:
            if b.name == name:
                return b
        raise KeyError(name)

    def link(self, name: str) -> IcLink:
        for link in self.ic_links:
            if link.name == name:
                return link
        raise KeyError(name)

    def link_index(self, name: str) -> int:
        for index, link in enumerate(self.ic_links):
            if link.name == name:
                return index
        raise KeyError(name)

    def buses_with_role(self, *roles: BusRole) -> Tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.role in roles)

    def branch_kind(self, branch: Branch) -> BusKind:
        return self.buses[branch.from_bus].kind

    def dc_local(self, bus_id: int) -> int:
        """Index of a DC bus inside the DC block."""
        return bus_id - self.n_ac

    def voltage_limits_pu(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper voltage bounds of every bus, per unit, in id order."""
        lo = np.array([self.base.voltage_to_pu(b.vmin, b.kind) for b in self.buses])
        hi = np.array([self.base.voltage_to_pu(b.vmax, b.kind) for b in self.buses])
        return lo, hi

    def ampacity_pu(self) -> np.ndarray:
        return np.array(
            [self.base.current_to_pu(br.ampacity, self.branch_kind(br)) for br in self.branches]
        )

    def with_roles(self, roles: Mapping[int, BusRole]) -> "NetworkModel":
        """Copy of the model with bus roles replaced."""
        buses = tuple(replace(b, role=roles[b.id]) if b.id in roles else b for b in self.buses)
        return replace(self, buses=buses)

    def with_link_mode(self, name: str, mode: IcMode) -> "NetworkModel":
        """Copy of the model with one IC switched to mode, roles included."""
        index = self.link_index(name)
        link = replace(self.ic_links[index], mode=mode)
        links = self.ic_links[:index] + (link,) + self.ic_links[index + 1 :]
        ac_role, dc_role = mode.roles
        model = replace(self, ic_links=links)
        return model.with_roles({link.ac_bus: ac_role, link.dc_bus: dc_role})

    def link_at(self, bus_id: int) -> Optional[IcLink]:
        for link in self.ic_links:
            if bus_id in (link.ac_bus, link.dc_bus):
                return link
        return None


def branch_stamp(
    branch: Branch, model: NetworkModel
) -> Tuple[BusKind, Tuple[int, int], np.ndarray]:
    """
    Contribution of one branch to its admittance matrix.

    Returns:
        Tuple of (kind, local (from, to) indices, 2x2 stamp)
    """
    kind = model.branch_kind(branch)
    offset = 0 if kind is BusKind.AC else model.n_ac
    f, t = branch.from_bus - offset, branch.to_bus - offset
    y = branch.series_admittance
    stamp = np.array(
        [[y + branch.shunt_from, -y], [-y, y + branch.shunt_to]],
        dtype=complex,
    )
    if kind is BusKind.DC:
        stamp = stamp.real
    return kind, (f, t), stamp


def _check_connected(n: int, pairs: Iterable[Tuple[int, int]], what: str) -> None:
    pairs = list(pairs)
    if n <= 1:
        return
    rows = [p[0] for p in pairs]
    cols = [p[1] for p in pairs]
    graph = coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
    count, _ = connected_components(graph, directed=False)
    if count > 1:
        raise DisconnectedGridError(f"{what} grid has {count} disconnected components")


def _check_duplicates(branches: Sequence[Branch]) -> None:
    seen: Dict[Tuple[int, int], Branch] = {}
    for br in branches:
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        if key in seen and not (br.aggregate and seen[key].aggregate):
            raise DuplicateBranchError(
                f"branches {seen[key].label} and {br.label} join the same buses {key}"
            )
        seen[key] = br


def build_admittance(model: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
    """
    Assemble the AC admittance matrix and the DC conductance matrix.

    Args:
        model: Network model

    Returns:
        Tuple of (Yac complex n_ac x n_ac, Ydc real n_dc x n_dc), read-only arrays

    Raises:
        DisconnectedGridError: if the AC or DC sub-grid is not connected
        DuplicateBranchError: if two non-aggregate branches join the same buses
    """
    return _cached_admittance(model)


@lru_cache(maxsize=64)
def _cached_admittance(model: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
    n_ac, n_dc = model.n_ac, model.n_dc
    _check_duplicates(model.branches)
    yac = np.zeros((n_ac, n_ac), dtype=complex)
    ydc = np.zeros((n_dc, n_dc), dtype=complex)
    ac_pairs, dc_pairs = [], []
    for br in model.branches:
        kind, (f, t), stamp = branch_stamp(br, model)
        target = yac if kind is BusKind.AC else ydc
        target[np.ix_([f, t], [f, t])] += stamp
        (ac_pairs if kind is BusKind.AC else dc_pairs).append((f, t))
    _check_connected(n_ac, ac_pairs, "AC")
    _check_connected(n_dc, dc_pairs, "DC")
    ydc_real = ydc.real.copy()
    yac.flags.writeable = False
    ydc_real.flags.writeable = False
    return yac, ydc_real


def validate(model: NetworkModel, transition: bool = False) -> List[str]:
    """
    Check structural invariants of the model.

    Args:
        model: Network model
        transition: The model is taken inside an islanding or reconnection
            command sequence, where the GCP slack and a DC_V bus may coexist

    Returns:
        List[str]: Human-readable violations; empty when the model is valid
    """
    violations: List[str] = []
    n = len(model.buses)
    n_ac = model.n_ac

    for index, b in enumerate(model.buses):
        if b.id != index:
            violations.append(f"bus ids not dense: position {index} holds id {b.id}")
        if (b.kind is BusKind.AC) != (index < n_ac):
            violations.append(f"bus {b.label}: AC buses must precede DC buses")
        if b.role.kind is not b.kind:
            violations.append(
                f"bus {b.label}: role {b.role.value} does not fit a {b.kind.value} bus"
            )
        if not b.vmin < b.vmax:
            violations.append(f"bus {b.label}: E_min must be below E_max")

    for br in model.branches:
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            violations.append(f"branch {br.label}: unknown endpoint")
            continue
        if br.from_bus == br.to_bus:
            violations.append(f"branch {br.label}: self loop")
        if model.buses[br.from_bus].kind is not model.buses[br.to_bus].kind:
            violations.append(f"branch {br.label}: joins an AC bus and a DC bus")
            continue
        if br.series_admittance == 0:
            violations.append(f"branch {br.label}: zero series admittance")
        if model.branch_kind(br) is BusKind.DC and (
            br.series_admittance.imag != 0 or br.shunt_from.imag != 0 or br.shunt_to.imag != 0
        ):
            violations.append(f"branch {br.label}: DC branch not real")
        if br.ampacity <= 0:
            violations.append(f"branch {br.label}: ampacity must be positive")

    ic_buses: Dict[int, str] = {}
    for link in model.ic_links:
        if not (0 <= link.ac_bus < n and 0 <= link.dc_bus < n):
            violations.append(f"IC {link.name}: unknown terminal bus")
            continue
        if model.buses[link.ac_bus].kind is not BusKind.AC:
            violations.append(f"IC {link.name}: ac_bus is not an AC bus")
        if model.buses[link.dc_bus].kind is not BusKind.DC:
            violations.append(f"IC {link.name}: dc_bus is not a DC bus")
        if link.rating <= 0:
            violations.append(f"IC {link.name}: rating must be positive")
        ac_role, dc_role = link.mode.roles
        roles = (model.buses[link.ac_bus].role, model.buses[link.dc_bus].role)
        if roles != (ac_role, dc_role):
            violations.append(f"IC {link.name}: role pairing does not match mode {link.mode.value}")
        for bus_id in (link.ac_bus, link.dc_bus):
            if bus_id in ic_buses:
                violations.append(f"bus {bus_id} belongs to IC {ic_buses[bus_id]} and {link.name}")
            ic_buses[bus_id] = link.name

    for b in model.buses:
        if b.role.is_ic and b.id not in ic_buses:
            violations.append(f"bus {b.label}: IC role without an IC link")

    roles = [b.role for b in model.buses]
    slack_count = roles.count(BusRole.AC_SLACK)
    if slack_count > 1:
        violations.append("multiple slack buses")
    if slack_count and BusRole.DC_V in roles and not transition:
        violations.append("slack bus and DC_V bus both balance active power")
    if slack_count == 0 and BusRole.DC_V not in roles:
        violations.append("no active-power slack")
    if model.n_ac and slack_count == 0 and BusRole.IC_AC_FORMING not in roles:
        violations.append("no AC angle reference")
    if model.n_dc and not ({BusRole.DC_V, BusRole.IC_DC_VOLTAGE} & set(roles)):
        violations.append("no DC voltage reference")

    try:
        _check_duplicates(model.branches)
    except DuplicateBranchError as e:
        violations.append(str(e))
    if not violations:
        try:
            build_admittance(model)
        except DisconnectedGridError as e:
            violations.append(str(e))
    return violations


def ensure_valid(model: NetworkModel, transition: bool = False) -> NetworkModel:
    violations = validate(model, transition)
    if violations:
        raise ModelValidationError(violations)
    return model


def filter_pi_equivalent(params: FilterParams, z_base: float) -> Tuple[complex, complex, complex]:
    """
    Pi-equivalent of the series-shunt-series filter two-port.

    Args:
        params: Filter elements (ohm, siemens)
        z_base: AC base impedance (ohm)

    Returns:
        Tuple of (series admittance, converter-side shunt, grid-side shunt), per unit
    """
    z1 = complex(params.r1, params.x1) / z_base
    z2 = complex(params.r2, params.x2) / z_base
    yc = complex(0.0, params.b) * z_base
    # ABCD of series z1, shunt yc, series z2
    abcd = (
        np.array([[1.0, z1], [0.0, 1.0]], dtype=complex)
        @ np.array([[1.0, 0.0], [yc, 1.0]], dtype=complex)
        @ np.array([[1.0, z2], [0.0, 1.0]], dtype=complex)
    )
    a, b_, d = abcd[0, 0], abcd[0, 1], abcd[1, 1]
    if b_ == 0:
        raise FilterError("filter has no series element")
    return 1.0 / b_, (d - 1.0) / b_, (a - 1.0) / b_


def embed_filter(link_name: str, model: NetworkModel) -> NetworkModel:
    """
    Replace an IC's output filter by an explicit Pi-branch.

    A new AC bus becomes the converter terminal and takes over the IC AC role;
    the former IC bus stays as the grid-side node with a zero-injection role.
    DC buses are renumbered so AC ids stay first.

    Raises:
        FilterError: if the filter has a negative element or no series element
    """
    link = model.link(link_name)
    params = link.filter
    if params is None or params.is_empty():
        return model
    if not params.is_passive():
        raise FilterError(f"filter of IC {link.name} has a negative element")

    base = model.base
    series, shunt_conv, shunt_grid = filter_pi_equivalent(params, base.base_impedance(BusKind.AC))
    n_ac = model.n_ac

    def renumber(bus_id: int) -> int:
        return bus_id + 1 if bus_id >= n_ac else bus_id

    old = model.bus(link.ac_bus)
    terminal = Bus(n_ac, BusKind.AC, old.role, old.vmin, old.vmax, f"{old.label}_conv")
    buses: List[Bus] = []
    for b in model.buses:
        if b.id == link.ac_bus:
            buses.append(replace(b, role=BusRole.AC_PQ))
        elif b.kind is BusKind.DC:
            buses.append(replace(b, id=renumber(b.id)))
        else:
            buses.append(b)
    buses.insert(n_ac, terminal)

    branches = [
        replace(br, from_bus=renumber(br.from_bus), to_bus=renumber(br.to_bus))
        for br in model.branches
    ]
    rated_current = link.rating / (math.sqrt(3.0) * base.base_voltage_ac)
    branches.append(
        Branch(
            from_bus=n_ac,
            to_bus=link.ac_bus,
            series_admittance=series,
            shunt_from=shunt_conv,
            shunt_to=shunt_grid,
            ampacity=rated_current,
            name=f"{link.name}_filter",
        )
    )
    links = tuple(
        replace(
            other,
            ac_bus=n_ac if other.name == link.name else other.ac_bus,
            dc_bus=renumber(other.dc_bus),
            filter=None if other.name == link.name else other.filter,
        )
        for other in model.ic_links
    )
    logger.debug("embedded filter of %s as branch %d-%d", link.name, n_ac, link.ac_bus)
    return NetworkModel(tuple(buses), tuple(branches), links, base)


# File format


BUNDLED_NETWORKS = {"cigre27": "cigre27.network.json"}


def bundled_path(name: str) -> str:
    """Filesystem path of a bundled data file."""
    return str(resources.files("hybridgrid").joinpath("data", name))


def resolve_network_path(path_or_name: Union[str, "os.PathLike[str]"]) -> str:
    text = os.fspath(path_or_name)
    if text in BUNDLED_NETWORKS:
        return bundled_path(BUNDLED_NETWORKS[text])
    return text


def network_from_dict(data: Mapping[str, Any], embed_filters: bool = False) -> NetworkModel:
    """
    Build a NetworkModel from its JSON form.

    Impedances are given in ohm, shunt susceptance in siemens, limits in V and A.
    """
    base_data = require(data, "base", "")
    base = PerUnitBase(
        float(require(base_data, "power", "base")),
        float(require(base_data, "voltage_ac", "base")),
        float(require(base_data, "voltage_dc", "base")),
    )

    buses = []
    for index, entry in enumerate(require(data, "buses", "")):
        where = f"buses[{index}]"
        try:
            kind = BusKind(require(entry, "kind", where))
            role = BusRole(require(entry, "role", where))
        except ValueError as e:
            raise SchemaError(where, str(e)) from e
        buses.append(
            Bus(
                id=int(require(entry, "id", where)),
                kind=kind,
                role=role,
                vmin=float(require(entry, "vmin", where)),
                vmax=float(require(entry, "vmax", where)),
                name=str(entry.get("name", "")),
            )
        )
    kinds = {b.id: b.kind for b in buses}

    branches = []
    for index, entry in enumerate(require(data, "branches", "")):
        where = f"branches[{index}]"
        f, t = int(require(entry, "from", where)), int(require(entry, "to", where))
        if f not in kinds:
            raise SchemaError(f"{where}.from", f"unknown bus {f}")
        z_base = base.base_impedance(kinds[f])
        z = complex(float(require(entry, "r", where)), float(entry.get("x", 0.0))) / z_base
        if z == 0:
            raise SchemaError(where, "zero series impedance")
        half_b = 0.5 * float(entry.get("b_shunt", 0.0)) * z_base
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                series_admittance=1.0 / z,
                shunt_from=complex(0.0, half_b),
                shunt_to=complex(0.0, half_b),
                ampacity=float(entry.get("ampacity", math.inf)),
                name=str(entry.get("name", "")),
                aggregate=bool(entry.get("aggregate", False)),
            )
        )

    links = []
    for index, entry in enumerate(data.get("ic_links", [])):
        where = f"ic_links[{index}]"
        try:
            loss = LossParams.from_dict(require(entry, "loss_params", where))
            mode = IcMode(entry.get("mode", IcMode.POWER.value))
        except (KeyError, ValueError) as e:
            raise SchemaError(where, str(e)) from e
        filt = entry.get("filter")
        links.append(
            IcLink(
                name=str(require(entry, "name", where)),
                ac_bus=int(require(entry, "ac_bus", where)),
                dc_bus=int(require(entry, "dc_bus", where)),
                rating=float(require(entry, "rating", where)),
                loss_params=loss,
                mode=mode,
                filter=FilterParams(**filt) if filt else None,
            )
        )

    model = NetworkModel(tuple(buses), tuple(branches), tuple(links), base)
    if embed_filters:
        for link in links:
            if link.filter is not None:
                model = embed_filter(link.name, model)
    return model


def load_network(
    path_or_name: Union[str, "os.PathLike[str]"], embed_filters: bool = False
) -> NetworkModel:
    """
    Load a network file, or a bundled network by name (e.g. "cigre27").

    Raises:
        SchemaError: if the file does not match the layout
    """
    path = resolve_network_path(path_or_name)
    model = network_from_dict(read_json(path), embed_filters=embed_filters)
    logger.info("loaded network %s: %d AC, %d DC buses", path, model.n_ac, model.n_dc)
    return model
