#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Quasi-static simulation

This module steps a hybrid microgrid through a scenario: profile-driven
injections, the islanding state machine, the angle PI controller, the
sensitivity-based OPF every control period, and one load flow per tick that
stands in for the physical plant.

Each tick runs in this order:
    1. commands that are due are applied to the plant, in sequence order
    2. the state machine looks at the last plant solution and the events
    3. the PI controller updates the frequency offset while resynchronising
    4. the OPF dispatches new setpoints on control ticks (held while a
       command sequence is pending)
    5. the plant load flow is solved with the current setpoints and profiles
    6. storage SoC and the upstream angle advance, and the tick is recorded
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import polars as pl

from .control import (
    Command,
    ControlEvent,
    GcpMeasurements,
    OperatingState,
    Phasor,
    PiController,
    PiState,
    StateMachine,
    SynchroCheckTolerances,
    TransitionCommandSequence,
    TransitionCriteria,
)
from .converter import LossDerivative
from .errors import (
    HybridGridError,
    LoadFlowError,
    ProfileUnderrunError,
    ScenarioError,
    SchemaError,
    SimulationError,
)
from .loadflow import (
    GridState,
    LoadFlowOptions,
    SetpointSet,
    branch_current_magnitudes,
    nodal_injections,
    solve,
)
from .network import (
    BusKind,
    BusRole,
    IcMode,
    NetworkModel,
    bundled_path,
    ensure_valid,
    load_network,
)
from .opf import (
    DeviceLimits,
    OpfOptions,
    OpfWeights,
    StorageLimits,
    apply_commands,
    build,
    extract_setpoints,
    solve_prepare,
    solve_qp,
)
from .sensitivity import SensitivityOptions, compute
from .utils.io import read_json, require
from .utils.phasor import wrap_angle_deg

logger = logging.getLogger(__name__)

BUNDLED_SCENARIOS = {"cigre27": "cigre27.scenario.json"}

DEFAULT_SCENARIO = {
    "tick": 0.1,
    "control_step": 1.0,
    "seed": 0,
    "noise_sigma": 0.0,
    "loss_derivative": "full",
    "frequency": {"nominal": 50.0, "upstream_offset": 0.0},
    "transition": {"epsilon_p": 500.0, "epsilon_q": 500.0, "breaker_delay": 2.0},
    "synchro_check": {"magnitude": 5.0, "angle": 2.0, "frequency": 0.02},
    "pi": {"kp": 0.002, "ki": 0.0004, "f_max": 0.1, "period": 0.1},
    "ramp_fraction": 0.1,
    "ampacity_margin": 0.95,
}


@dataclass(frozen=True)
class Profile:
    """Time series held constant between samples."""

    time: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> float:
        index = int(np.searchsorted(self.time, t + 1e-9, side="right")) - 1
        return float(self.values[max(index, 0)])


@dataclass(frozen=True)
class DeviceSpec:
    """
    Controllable device; bounds and initial values in W, var and V.

    Attributes:
        name: Device name
        bus: Bus the bounds apply to
        p: Active power bounds, or None when P is not dispatched
        q: Reactive power bounds, or None
        v: Voltage setpoint bounds, or None
        p0: Initial active setpoint
        q0: Initial reactive setpoint
        v0: Initial voltage setpoint
    """

    name: str
    bus: int
    p: Optional[Tuple[float, float]] = None
    q: Optional[Tuple[float, float]] = None
    v: Optional[Tuple[float, float]] = None
    p0: float = 0.0
    q0: float = 0.0
    v0: Optional[float] = None


@dataclass(frozen=True)
class InjectionSpec:
    """Uncontrolled injection driven by profiles (positive means generation)."""

    bus: int
    p_profile: Optional[str] = None
    q_profile: Optional[str] = None


@dataclass
class Scenario:
    name: str
    network: NetworkModel
    duration: float
    tick: float
    control_step: float
    seed: int
    noise_sigma: float
    loss_derivative: LossDerivative
    nominal_frequency: float
    upstream_offset: float
    gcp_bus: int
    forming_link: str
    storage: Optional[StorageLimits]
    soc_init: float
    devices: List[DeviceSpec]
    injections: List[InjectionSpec]
    profiles: Dict[str, Profile]
    events: List[Tuple[float, ControlEvent]]
    weights: OpfWeights
    pi: PiState
    synchro: SynchroCheckTolerances
    criteria: TransitionCriteria
    breaker_delay: float
    ramp_fraction: float
    ampacity_margin: float
    dc_voltage_ref: float


def _pair(value: Any, where: str) -> Optional[Tuple[float, float]]:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SchemaError(where, "expected [min, max]")
    return float(value[0]), float(value[1])


def _merged(defaults: Mapping[str, Any], data: Mapping[str, Any]) -> Dict[str, Any]:
    result = dict(defaults)
    result.update(data)
    return result


def scenario_from_dict(data: Mapping[str, Any], base_dir: str = ".") -> Scenario:
    """
    Build a Scenario from its JSON form.

    Raises:
        SchemaError: on missing fields or unknown profile names
        ProfileUnderrunError: if a profile ends before the duration
    """
    cfg = _merged(DEFAULT_SCENARIO, data)
    network_ref = str(require(cfg, "network", ""))
    if network_ref.endswith(".json") and not os.path.isabs(network_ref):
        candidate = os.path.join(base_dir, network_ref)
        network_ref = candidate if os.path.exists(candidate) else network_ref
    network = load_network(network_ref)
    base = network.base
    duration = float(require(cfg, "duration", ""))

    raw_profiles = require(cfg, "profiles", "")
    times = np.asarray(require(raw_profiles, "time", "profiles"), dtype=float)
    profiles: Dict[str, Profile] = {}
    for key, values in raw_profiles.items():
        if key == "time":
            continue
        values = np.asarray(values, dtype=float)
        if len(values) != len(times):
            raise SchemaError(f"profiles.{key}", f"{len(values)} values for {len(times)} times")
        profiles[key] = Profile(times, values)
    if len(times) == 0 or times[0] > 0.0:
        raise SchemaError("profiles.time", "must start at 0")
    if times[-1] < duration:
        raise ProfileUnderrunError(f"profiles end at {times[-1]} s, duration is {duration} s")

    devices = []
    for index, entry in enumerate(require(cfg, "devices", "")):
        where = f"devices[{index}]"
        devices.append(
            DeviceSpec(
                name=str(require(entry, "name", where)),
                bus=int(require(entry, "bus", where)),
                p=_pair(entry.get("p"), f"{where}.p"),
                q=_pair(entry.get("q"), f"{where}.q"),
                v=_pair(entry.get("v"), f"{where}.v"),
                p0=float(entry.get("p0", 0.0)),
                q0=float(entry.get("q0", 0.0)),
                v0=float(entry["v0"]) if "v0" in entry else None,
            )
        )

    injections = []
    for index, entry in enumerate(cfg.get("injections", [])):
        where = f"injections[{index}]"
        spec = InjectionSpec(
            bus=int(require(entry, "bus", where)),
            p_profile=entry.get("p"),
            q_profile=entry.get("q"),
        )
        for attr in ("p_profile", "q_profile"):
            name = getattr(spec, attr)
            if name is not None and name not in profiles:
                raise SchemaError(f"{where}.{attr[0]}", f"missing profile column {name!r}")
        injections.append(spec)

    storage = None
    soc_init = 0.5
    if cfg.get("storage"):
        s = cfg["storage"]
        storage = StorageLimits(
            bus=int(require(s, "bus", "storage")),
            power_max=float(require(s, "power_max", "storage")),
            energy_wh=float(require(s, "energy_wh", "storage")),
            efficiency=float(s.get("efficiency", 1.0)),
            soc_min=float(s.get("soc_min", 0.1)),
            soc_max=float(s.get("soc_max", 0.9)),
            soc_ref=float(s.get("soc_ref", 0.5)),
        )
        soc_init = float(s.get("soc_init", storage.soc_ref))

    events = []
    for index, entry in enumerate(cfg.get("events", [])):
        where = f"events[{index}]"
        try:
            event = ControlEvent(require(entry, "event", where))
        except ValueError as e:
            raise SchemaError(f"{where}.event", str(e)) from e
        events.append((float(require(entry, "t", where)), event))

    frequency = _merged(DEFAULT_SCENARIO["frequency"], cfg.get("frequency", {}))
    transition = _merged(DEFAULT_SCENARIO["transition"], cfg.get("transition", {}))
    synchro = _merged(DEFAULT_SCENARIO["synchro_check"], cfg.get("synchro_check", {}))
    pi = _merged(DEFAULT_SCENARIO["pi"], cfg.get("pi", {}))
    dc_ref_v = float(cfg.get("dc_voltage_ref", base.base_voltage_dc))
    tick, control_step = float(cfg["tick"]), float(cfg["control_step"])
    if tick <= 0 or duration < 0:
        raise SchemaError("tick", "tick must be positive and duration non-negative")
    if abs(control_step / tick - round(control_step / tick)) > 1e-9 or control_step < tick:
        raise SchemaError(
            "control_step", f"{control_step} s is not a multiple of the {tick} s tick"
        )

    try:
        forming_link = str(require(cfg, "forming_link", ""))
        network.link(forming_link)
    except KeyError as e:
        raise SchemaError("forming_link", f"unknown IC {e}") from e

    return Scenario(
        name=str(cfg.get("name", "scenario")),
        network=network,
        duration=duration,
        tick=tick,
        control_step=control_step,
        seed=int(cfg["seed"]),
        noise_sigma=float(cfg["noise_sigma"]),
        loss_derivative=LossDerivative(cfg["loss_derivative"]),
        nominal_frequency=float(frequency["nominal"]),
        upstream_offset=float(frequency["upstream_offset"]),
        gcp_bus=int(require(cfg, "gcp_bus", "")),
        forming_link=forming_link,
        storage=storage,
        soc_init=soc_init,
        devices=devices,
        injections=injections,
        profiles=profiles,
        events=sorted(events, key=lambda item: item[0]),
        weights=OpfWeights.from_dict(cfg.get("weights", {})),
        pi=PiState(
            kp=float(pi["kp"]),
            ki=float(pi["ki"]),
            f_max=float(pi["f_max"]),
            period=float(pi["period"]),
        ),
        synchro=SynchroCheckTolerances(
            float(synchro["magnitude"]), float(synchro["angle"]), float(synchro["frequency"])
        ),
        criteria=TransitionCriteria(
            base.power_to_pu(float(transition["epsilon_p"])),
            base.power_to_pu(float(transition["epsilon_q"])),
        ),
        breaker_delay=float(transition["breaker_delay"]),
        ramp_fraction=float(cfg["ramp_fraction"]),
        ampacity_margin=float(cfg["ampacity_margin"]),
        dc_voltage_ref=base.voltage_to_pu(dc_ref_v, BusKind.DC),
    )


def with_duration(scenario: Scenario, duration: float) -> Scenario:
    """
    Copy of scenario with another duration.

    Raises:
        ProfileUnderrunError: if a profile ends before the new duration
    """
    if duration < 0:
        raise SchemaError("duration", "must be non-negative")
    for name, profile in scenario.profiles.items():
        if len(profile.time) and profile.time[-1] < duration:
            raise ProfileUnderrunError(
                f"profile {name} ends at {profile.time[-1]} s, duration is {duration} s"
            )
    return replace(scenario, duration=float(duration))


def resolve_scenario_path(path_or_name: Union[str, "os.PathLike[str]"]) -> str:
    text = os.fspath(path_or_name)
    if text in BUNDLED_SCENARIOS:
        return bundled_path(BUNDLED_SCENARIOS[text])
    return text


def load_scenario(path_or_name: Union[str, "os.PathLike[str]"]) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (e.g. "cigre27")."""
    path = resolve_scenario_path(path_or_name)
    return scenario_from_dict(read_json(path), os.path.dirname(os.path.abspath(path)))


@dataclass
class PlantState:
    """
    The simulated plant.

    Attributes:
        model: Network with the roles and IC modes in force
        setpoints: Device setpoints (profiles excluded), per unit
        state: Last load flow solution
        breaker_closed: GCP breaker position
        soc: Storage state of charge
        upstream_angle: Upstream voltage angle in the plant frame (degrees)
        frequency_offset: PI frequency offset of the forming IC (Hz)
        time: Simulated time (s)
        iterations: Newton iterations of the last load flow
    """

    model: NetworkModel
    setpoints: SetpointSet
    state: GridState
    breaker_closed: bool = True
    soc: float = 0.5
    upstream_angle: float = 0.0
    frequency_offset: float = 0.0
    time: float = 0.0
    iterations: int = 0


def injection_setpoints(scenario: Scenario, setpoints: SetpointSet, t: float) -> SetpointSet:
    """Device setpoints plus the profile injections at time t."""
    base = scenario.network.base
    full = setpoints.copy()
    for spec in scenario.injections:
        for name, table in ((spec.p_profile, full.p), (spec.q_profile, full.q)):
            if name is not None:
                value = base.power_to_pu(scenario.profiles[name].at(t))
                table[spec.bus] = table.get(spec.bus, 0.0) + value
    return full


def downstream_frequency(plant: PlantState, scenario: Scenario) -> float:
    if plant.breaker_closed:
        return scenario.nominal_frequency + scenario.upstream_offset
    return scenario.nominal_frequency + plant.frequency_offset


def downstream_phasor(plant: PlantState, scenario: Scenario) -> Phasor:
    """Microgrid side of the GCP breaker."""
    e_gcp = plant.state.e_ac[scenario.gcp_bus]
    return Phasor(
        abs(e_gcp) * scenario.network.base.base_voltage_ac,
        math.degrees(float(np.angle(e_gcp))),
        downstream_frequency(plant, scenario),
    )


def upstream_phasor(
    plant: PlantState, scenario: Scenario, t: Optional[float] = None
) -> Phasor:
    """
    Upstream side of the GCP breaker at time t.

    Grid-connected it is the GCP bus phasor itself; islanded it has nominal
    magnitude, nominal frequency plus the upstream offset and the drifting angle.
    The angle is extrapolated from the last plant step to t (plant time by default).
    """
    if plant.breaker_closed:
        return downstream_phasor(plant, scenario)
    f_up = scenario.nominal_frequency + scenario.upstream_offset
    angle = plant.upstream_angle
    if t is not None:
        angle += 360.0 * (f_up - downstream_frequency(plant, scenario)) * (t - plant.time)
    return Phasor(scenario.network.base.base_voltage_ac, wrap_angle_deg(angle), f_up)


def measure(
    plant: PlantState, scenario: Scenario, rng: Optional[np.random.Generator] = None
) -> GridState:
    """The plant state, with zero-mean Gaussian noise when the scenario asks for it."""
    state = plant.state
    sigma = scenario.noise_sigma
    if sigma <= 0 or rng is None:
        return state
    n = len(state.e_ac)
    noise = rng.normal(0.0, sigma, size=2 * n + len(state.e_dc))
    return GridState(state.e_ac + noise[:n] + 1j * noise[n : 2 * n], state.e_dc + noise[2 * n :])


def plant_step(
    plant: PlantState,
    setpoints: SetpointSet,
    scenario: Scenario,
    t: float,
    options: Optional[LoadFlowOptions] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[PlantState, GridState]:
    """
    Advance the plant by one tick.

    Solves the load flow for the topology in force, integrates the storage
    SoC over the tick and advances the upstream angle while islanded.

    Args:
        plant: Plant to advance, updated in place
        setpoints: Device setpoints to hold over the tick
        scenario: Scenario with profiles and timing
        t: Simulated time (s)
        options: Load flow settings
        rng: Noise source for the measurements

    Returns:
        Tuple of (plant, measured state)

    Raises:
        SimulationError: if the load flow diverges
    """
    options = options or LoadFlowOptions(loss_derivative=scenario.loss_derivative)
    plant.time = t
    plant.setpoints = setpoints
    try:
        full = injection_setpoints(scenario, setpoints, t)
        result = solve(plant.model, full, plant.state, options)
    except LoadFlowError as e:
        raise SimulationError(t, e) from e
    plant.state = result.state
    plant.iterations = result.iterations

    storage = scenario.storage
    if storage is not None:
        _, p_dc = nodal_injections(plant.model, plant.state)
        p_watts = scenario.network.base.power_to_si(float(p_dc[plant.model.dc_local(storage.bus)]))
        soc = plant.soc - storage.efficiency * p_watts * scenario.tick / 3600.0 / storage.energy_wh
        if not 0.0 <= soc <= 1.0:
            logger.warning("t=%.1f SoC %.4f clipped to [0, 1]", t, soc)
        plant.soc = min(max(soc, 0.0), 1.0)

    if not plant.breaker_closed:
        f_up = scenario.nominal_frequency + scenario.upstream_offset
        drift = 360.0 * (f_up - downstream_frequency(plant, scenario)) * scenario.tick
        plant.upstream_angle = wrap_angle_deg(plant.upstream_angle + drift)
    return plant, measure(plant, scenario, rng)


@dataclass
class SimulationOutput:
    """Per-tick records plus the event log; timings are kept apart from the trajectory."""

    records: List[Dict[str, Any]] = field(default_factory=list)
    transitions: List[Tuple[float, str, str]] = field(default_factory=list)
    commands: List[Tuple[float, str]] = field(default_factory=list)
    timings: List[Tuple[float, float]] = field(default_factory=list)
    monitored_branch: str = ""
    monitored_limit: float = math.inf

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(self.records)

    def timing_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "time": [t for t, _ in self.timings],
                "opf_solve_time_s": [s for _, s in self.timings],
            },
            schema={"time": pl.Float64, "opf_solve_time_s": pl.Float64},
        )

    def summary(self) -> Dict[str, Any]:
        """Margins, transition timestamps and violation counts; deterministic for a seed."""
        frame = self.to_frame()
        summary: Dict[str, Any] = {
            "ticks": len(self.records),
            "monitored_branch": self.monitored_branch,
            "monitored_limit_a": self.monitored_limit,
            "transitions": [{"time": t, "from": a, "to": b} for t, a, b in self.transitions],
            "commands": [{"time": t, "command": c} for t, c in self.commands],
        }
        if frame.height == 0:
            return summary
        summary.update(
            {
                "monitored_max_current_a": float(frame[f"i_{self.monitored_branch}_a"].max()),
                "ampacity_violation_ticks": int(frame["ampacity_violation"].sum()),
                "min_ampacity_margin_a": float(frame["min_ampacity_margin_a"].min()),
                "min_voltage_margin_pu": float(frame["min_voltage_margin_pu"].min()),
                "max_ac_voltage_deviation_pct": float(frame["max_ac_deviation_pct"].max()),
                "max_dc_voltage_deviation_pct": float(frame["max_dc_deviation_pct"].max()),
                "soc_min": float(frame["soc"].min()),
                "soc_max": float(frame["soc"].max()),
                "opf_steps": int((frame["opf_status"] == "ok").sum()),
            }
        )
        return summary


class Simulator:
    """
    Runs one scenario.

    Args:
        scenario: Scenario definition
        control: Dispatch OPF setpoints and react to events; False holds the
            initial setpoints grid-connected for the whole run
    """

    def __init__(self, scenario: Scenario, control: bool = True):
        self.scenario = scenario
        self.control = control
        self.rng = np.random.default_rng(scenario.seed)
        self.machine = StateMachine(
            criteria=scenario.criteria,
            synchro_tolerances=scenario.synchro,
            breaker_delay=scenario.breaker_delay,
        )
        self.pi = PiController(replace(scenario.pi, integral=0.0))
        self.lf_options = LoadFlowOptions(loss_derivative=scenario.loss_derivative)
        self.sc_options = SensitivityOptions(loss_derivative=scenario.loss_derivative)
        self.opf_options = OpfOptions(ampacity_margin=scenario.ampacity_margin)
        self.pending: List[Tuple[float, Command]] = []
        self.output = SimulationOutput()
        self.plant = self._initial_plant()
        self.measured = self.plant.state

        model = scenario.network
        self.output.monitored_limit, self.output.monitored_branch = min(
            (br.ampacity, br.label) for br in model.branches
        )

    def _initial_plant(self) -> PlantState:
        sc = self.scenario
        model = sc.network
        base = model.base
        setpoints = SetpointSet()
        for bus_id in model.buses_with_role(BusRole.AC_SLACK):
            setpoints.vmag[bus_id] = 1.0
            setpoints.vangle[bus_id] = 0.0
        for device in sc.devices:
            bus = model.bus(device.bus)
            role = bus.role
            if role in (BusRole.AC_PQ, BusRole.IC_AC_POWER, BusRole.DC_P):
                setpoints.p[device.bus] = base.power_to_pu(device.p0)
            if role in (BusRole.AC_PQ, BusRole.IC_AC_POWER, BusRole.IC_AC_VOLTAGE):
                setpoints.q[device.bus] = base.power_to_pu(device.q0)
            if device.v0 is not None and role in (BusRole.IC_DC_VOLTAGE, BusRole.DC_V):
                setpoints.vdc[device.bus] = base.voltage_to_pu(device.v0, bus.kind)
        full = injection_setpoints(sc, setpoints, 0.0)
        state = solve(model, full, None, self.lf_options).state
        return PlantState(model, setpoints, state, soc=sc.soc_init)

    def device_limits(self) -> DeviceLimits:
        sc = self.scenario
        model = self.plant.model
        base = model.base
        limits = DeviceLimits(
            forming_link=sc.forming_link,
            gcp_bus=sc.gcp_bus,
            ramp=sc.ramp_fraction * base.power_to_pu(model.link(sc.forming_link).rating),
            time_step=sc.control_step,
            storage=sc.storage,
            soc=self.plant.soc,
            dc_voltage_ref=sc.dc_voltage_ref,
        )
        for device in sc.devices:
            kind = model.bus(device.bus).kind
            if device.p is not None:
                limits.p_bounds[device.bus] = tuple(base.power_to_pu(v) for v in device.p)
            if device.q is not None:
                limits.q_bounds[device.bus] = tuple(base.power_to_pu(v) for v in device.q)
            if device.v is not None:
                limits.v_bounds[device.bus] = tuple(base.voltage_to_pu(v, kind) for v in device.v)
        return limits

    # Commands

    def apply_command(self, command: Command) -> None:
        """Apply one transition command with bumpless setpoint capture."""
        plant = self.plant
        sc = self.scenario
        model = plant.model
        link = model.link(sc.forming_link)
        s_ac, p_dc = nodal_injections(model, plant.state)
        state = plant.state
        sp = plant.setpoints

        if command is Command.ESS_TO_VOLTAGE_MODE and sc.storage is not None:
            bus = sc.storage.bus
            sp = sp.without_bus(bus)
            sp.vdc[bus] = float(state.e_dc[model.dc_local(bus)])
            model = model.with_roles({bus: BusRole.DC_V})
        elif command is Command.ESS_TO_POWER_MODE and sc.storage is not None:
            bus = sc.storage.bus
            sp = sp.without_bus(bus)
            sp.p[bus] = float(p_dc[model.dc_local(bus)])
            model = model.with_roles({bus: BusRole.DC_P})
        elif command is Command.IC_TO_FORMING:
            e_l = state.e_ac[link.ac_bus]
            sp = sp.without_bus(link.ac_bus).without_bus(link.dc_bus)
            sp.vmag[link.ac_bus] = float(abs(e_l))
            sp.vangle[link.ac_bus] = float(np.angle(e_l))
            model = model.with_link_mode(link.name, IcMode.FORMING)
        elif command is Command.IC_TO_FOLLOWING:
            sp = sp.without_bus(link.ac_bus).without_bus(link.dc_bus)
            sp.q[link.ac_bus] = float(s_ac[link.ac_bus].imag)
            sp.vdc[link.dc_bus] = float(state.e_dc[model.dc_local(link.dc_bus)])
            model = model.with_link_mode(link.name, IcMode.VOLTAGE)
        elif command is Command.OPEN_BREAKER:
            # island frame: forming IC at angle zero
            reference = float(np.angle(state.e_ac[link.ac_bus]))
            state = state.rotated(-reference)
            for bus in sp.vangle:
                sp.vangle[bus] -= reference
            sp = sp.without_bus(sc.gcp_bus)
            sp.p[sc.gcp_bus] = 0.0
            sp.q[sc.gcp_bus] = 0.0
            model = model.with_roles({sc.gcp_bus: BusRole.AC_PQ})
            plant.upstream_angle = math.degrees(float(np.angle(state.e_ac[sc.gcp_bus])))
            plant.frequency_offset = 0.0
            plant.breaker_closed = False
        elif command is Command.CLOSE_BREAKER:
            # grid frame: GCP at the upstream phasor, angle zero
            reference = math.radians(plant.upstream_angle)
            state = state.rotated(-reference)
            for bus in sp.vangle:
                sp.vangle[bus] -= reference
            sp = sp.without_bus(sc.gcp_bus)
            sp.vmag[sc.gcp_bus] = 1.0
            sp.vangle[sc.gcp_bus] = 0.0
            model = model.with_roles({sc.gcp_bus: BusRole.AC_SLACK})
            plant.upstream_angle = 0.0
            plant.frequency_offset = 0.0
            plant.breaker_closed = True
            self.pi.reset()

        plant.model, plant.setpoints, plant.state = model, sp, state
        self.output.commands.append((round(plant.time, 6), command.value))
        logger.info("t=%.1f applied %s", plant.time, command.value)

    def _schedule(self, t: float, sequence: TransitionCommandSequence) -> None:
        problems = sequence.ordering_violations()
        if problems:
            raise ScenarioError("; ".join(problems))
        for delay, command in sequence.entries:
            self.pending.append((t + delay, command))

    def _apply_due(self, t: float) -> None:
        applied = False
        while self.pending and self.pending[0][0] <= t + 1e-9:
            _, command = self.pending.pop(0)
            self.apply_command(command)
            applied = True
        if applied:
            ensure_valid(self.plant.model, transition=bool(self.pending))

    def gcp_measurements(self) -> GcpMeasurements:
        sc = self.scenario
        plant = self.plant
        s_ac, _ = nodal_injections(plant.model, self.measured)
        forming = plant.model.link(sc.forming_link)
        closed = plant.breaker_closed
        return GcpMeasurements(
            p_gcp=float(s_ac[sc.gcp_bus].real) if closed else 0.0,
            q_gcp=float(s_ac[sc.gcp_bus].imag) if closed else 0.0,
            p_forming=float(s_ac[forming.ac_bus].real),
            q_forming=float(s_ac[forming.ac_bus].imag),
            upstream=upstream_phasor(plant, sc),
            downstream=downstream_phasor(plant, sc),
        )

    # Dispatch

    def dispatch(self) -> str:
        """
        Run one OPF step and apply its setpoints.

        While preparing to island the island look-ahead problem is solved as well.
        Errors propagate; run tags them with the simulated time.
        """
        plant = self.plant
        sc = self.scenario
        limits = self.device_limits()
        scs = compute(plant.model, self.measured, options=self.sc_options)
        if self.machine.state is OperatingState.PREPARE_FOR_ISLAND:
            pair = solve_prepare(
                plant.model,
                self.measured,
                scs,
                sc.weights,
                limits,
                self.opf_options,
                prev_setpoints=plant.setpoints,
                lf_options=self.lf_options,
                sc_options=self.sc_options,
            )
            problem, solution, solve_time = pair.problem, pair.solution, pair.solve_time
        else:
            problem = build(
                plant.model,
                self.measured,
                scs,
                self.machine.state,
                sc.weights,
                limits,
                self.opf_options,
                prev_setpoints=plant.setpoints,
            )
            solution = solve_qp(problem, self.opf_options)
            solve_time = solution.solve_time
        commands = extract_setpoints(solution, problem, plant.setpoints)
        plant.setpoints = apply_commands(plant.setpoints, commands)
        self.output.timings.append((round(plant.time, 6), solve_time))
        return "ok"

    def _record(self, t: float, opf_status: str) -> Dict[str, Any]:
        plant = self.plant
        model = plant.model
        base = model.base
        sc = self.scenario
        s_ac, _ = nodal_injections(model, plant.state)
        up, down = upstream_phasor(plant, sc), downstream_phasor(plant, sc)
        closed = plant.breaker_closed
        record: Dict[str, Any] = {
            "time": round(t, 6),
            "state": self.machine.state.value,
            "breaker_closed": closed,
            "p_gcp_w": base.power_to_si(float(s_ac[sc.gcp_bus].real)) if closed else 0.0,
            "q_gcp_var": base.power_to_si(float(s_ac[sc.gcp_bus].imag)) if closed else 0.0,
        }
        for link in model.ic_links:
            record[f"p_{link.name}_w"] = base.power_to_si(float(s_ac[link.ac_bus].real))
            record[f"q_{link.name}_var"] = base.power_to_si(float(s_ac[link.ac_bus].imag))
            record[f"mode_{link.name}"] = link.mode.value

        currents = branch_current_magnitudes(model, plant.state)
        amp_margin = math.inf
        violation = False
        for br, current in zip(model.branches, currents):
            amps = base.current_to_si(float(current), model.branch_kind(br))
            record[f"i_{br.label}_a"] = amps
            amp_margin = min(amp_margin, br.ampacity - amps)
            violation = violation or amps > br.ampacity + 1e-6

        magnitudes = plant.state.magnitudes()
        v_lo, v_hi = model.voltage_limits_pu()
        for b, value in zip(model.buses, magnitudes):
            record[f"v_{b.label}_v"] = base.voltage_to_si(float(value), b.kind)
        ac = magnitudes[: model.n_ac]
        dc = magnitudes[model.n_ac :]
        margin = np.minimum(magnitudes - v_lo, v_hi - magnitudes)
        record["min_voltage_margin_pu"] = float(np.min(margin))
        record["max_ac_deviation_pct"] = float(np.max(np.abs(ac - 1.0)) * 100.0)
        record["max_dc_deviation_pct"] = float(
            np.max(np.abs(dc - sc.dc_voltage_ref)) / sc.dc_voltage_ref * 100.0
        )
        record["min_ampacity_margin_a"] = amp_margin
        record["ampacity_violation"] = violation
        record["frequency_hz"] = down.frequency
        record["angle_difference_deg"] = wrap_angle_deg(up.angle - down.angle)
        record["soc"] = plant.soc
        record["opf_status"] = opf_status
        record["loadflow_iterations"] = plant.iterations
        return record

    # Loop

    def _control_tick(self, n: int, t: float, signals: List[ControlEvent]) -> str:
        previous = self.machine.state
        sequence = self.machine.tick(t, signals, self.gcp_measurements())
        if self.machine.state is not previous:
            self.output.transitions.append((round(t, 6), previous.value, self.machine.state.value))
        if sequence is not None:
            self._schedule(t, sequence)
            self._apply_due(t)

        pi_every = max(int(round(self.pi.state.period / self.scenario.tick)), 1)
        if self.machine.state is OperatingState.RESYNCHRONISATION and n % pi_every == 0:
            up = upstream_phasor(self.plant, self.scenario)
            down = downstream_phasor(self.plant, self.scenario)
            self.plant.frequency_offset = self.pi.step(up.angle - down.angle)

        control_every = max(int(round(self.scenario.control_step / self.scenario.tick)), 1)
        if self.pending or sequence is not None:
            return "held"
        if n % control_every:
            return "skipped"
        return self.dispatch()

    def run(self) -> SimulationOutput:
        sc = self.scenario
        ticks = int(round(sc.duration / sc.tick))
        events = list(sc.events)

        for n in range(ticks):
            t = n * sc.tick
            self.plant.time = t
            try:
                self._apply_due(t)
                signals = []
                while events and events[0][0] < t + sc.tick / 2:
                    signals.append(events.pop(0)[1])
                status = self._control_tick(n, t, signals) if self.control else "off"
                _, self.measured = plant_step(
                    self.plant, self.plant.setpoints, sc, t, self.lf_options, self.rng
                )
                self.output.records.append(self._record(t, status))
            except SimulationError:
                raise
            except HybridGridError as e:
                raise SimulationError(t, e) from e
        logger.info("simulation %s finished: %d ticks", sc.name, ticks)
        return self.output


def run(scenario: Scenario, seed: Optional[int] = None, control: bool = True) -> SimulationOutput:
    """
    Simulate a scenario.

    Args:
        scenario: Scenario definition
        seed: Overrides the scenario seed
        control: False runs the no-control counterfactual

    Returns:
        SimulationOutput: Trajectory, transitions and timings
    """
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    return Simulator(scenario, control=control).run()
