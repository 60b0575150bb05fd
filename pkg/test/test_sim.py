#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for scenario loading and the quasi-static simulation loop.
"""

import copy
from dataclasses import replace

import numpy as np
import pytest
from polars.testing import assert_frame_equal

from hybridgrid.control import Command, ControlEvent, OperatingState
from hybridgrid import sim
from hybridgrid.errors import (
    ProfileUnderrunError,
    QpMaxIterationsError,
    SchemaError,
    SimulationError,
)
from hybridgrid.loadflow import Quantity, assemble_residuals
from hybridgrid.network import BusRole, IcMode, bundled_path
from hybridgrid.sim import (
    Profile,
    Simulator,
    downstream_phasor,
    injection_setpoints,
    load_scenario,
    plant_step,
    run,
    scenario_from_dict,
    upstream_phasor,
    with_duration,
)
from hybridgrid.utils.io import read_json


@pytest.fixture(scope="module")
def scenario_data():
    return read_json(bundled_path("cigre27.scenario.json"))


@pytest.fixture(scope="module")
def scenario():
    return load_scenario("cigre27")


def test_profile_holds_values_between_samples():
    profile = Profile(np.array([0.0, 10.0, 20.0]), np.array([1.0, 2.0, 3.0]))
    assert profile.at(0.0) == 1.0
    assert profile.at(9.9) == 1.0
    assert profile.at(10.0) == 2.0
    assert profile.at(25.0) == 3.0


def test_bundled_scenario(scenario):
    assert scenario.name == "cigre27"
    assert scenario.tick == pytest.approx(0.1)
    assert scenario.control_step == pytest.approx(1.0)
    assert scenario.criteria.epsilon_p == pytest.approx(0.005)
    assert scenario.dc_voltage_ref == pytest.approx(0.9)
    assert scenario.storage.bus == 24
    assert scenario.weights.w6 == pytest.approx(10.0)
    assert [event for _, event in scenario.events] == [
        ControlEvent.ISLAND_TRIGGER,
        ControlEvent.RESTORE_TRIGGER,
    ]


def test_missing_profile_column(scenario_data):
    data = copy.deepcopy(scenario_data)
    del data["profiles"]["pv_b11"]
    with pytest.raises(SchemaError) as info:
        scenario_from_dict(data)
    assert "pv_b11" in str(info.value)


def test_profiles_shorter_than_duration(scenario_data):
    data = copy.deepcopy(scenario_data)
    data["duration"] = 700.0
    with pytest.raises(ProfileUnderrunError):
        scenario_from_dict(data)


def test_control_step_must_be_a_tick_multiple(scenario_data):
    data = copy.deepcopy(scenario_data)
    data["control_step"] = 0.25
    with pytest.raises(SchemaError):
        scenario_from_dict(data)


def test_with_duration(scenario):
    assert with_duration(scenario, 5.0).duration == 5.0
    assert scenario.duration == 600.0
    with pytest.raises(ProfileUnderrunError):
        with_duration(scenario, 601.0)


def test_monitored_branch(scenario):
    simulator = Simulator(scenario)
    assert simulator.output.monitored_branch == "B10-B11"
    assert simulator.output.monitored_limit == pytest.approx(17.0)


def test_soc_integration(scenario):
    one_second = replace(scenario, tick=1.0)
    simulator = Simulator(one_second)
    plant = simulator.plant
    setpoints = plant.setpoints.with_value(Quantity.P, 24, 0.02)
    plant, _ = plant_step(plant, setpoints, one_second, 0.0)
    # 2 kW injected for one second out of 150 Wh
    assert plant.soc == pytest.approx(0.5 - 2000.0 / 3600.0 / 150.0, abs=1e-9)


def test_upstream_angle_drifts_while_open(scenario):
    simulator = Simulator(scenario)
    plant = simulator.plant
    plant.breaker_closed = False
    plant_step(plant, plant.setpoints, scenario, 0.0)
    assert plant.upstream_angle == pytest.approx(360.0 * 0.00231 * 0.1)


def test_upstream_phasor_at_a_later_time(scenario):
    simulator = Simulator(scenario)
    plant = simulator.plant
    connected = upstream_phasor(plant, scenario, 10.0)
    assert connected.angle == pytest.approx(downstream_phasor(plant, scenario).angle)

    plant.breaker_closed = False
    plant.upstream_angle = 30.0
    plant.time = 100.0
    assert upstream_phasor(plant, scenario).angle == pytest.approx(30.0)
    later = upstream_phasor(plant, scenario, 280.0)
    # 180 s at 0.00231 Hz
    assert later.angle == pytest.approx(30.0 + 360.0 * 0.00231 * 180.0)
    assert later.frequency == pytest.approx(50.00231)
    assert later.magnitude == pytest.approx(400.0)


def test_forming_capture_is_bumpless(scenario):
    simulator = Simulator(scenario)
    before = simulator.plant.state
    simulator.apply_command(Command.ESS_TO_VOLTAGE_MODE)
    simulator.apply_command(Command.IC_TO_FORMING)

    plant = simulator.plant
    assert plant.model.bus(24).role is BusRole.DC_V
    assert plant.model.link("IC1").mode is IcMode.FORMING
    full = injection_setpoints(scenario, plant.setpoints, 0.0)
    assert np.max(np.abs(assemble_residuals(plant.model, full, before))) < 1e-6
    assert [c for _, c in simulator.output.commands] == [
        "ess_to_voltage_mode",
        "ic_to_forming",
    ]


def test_open_breaker_moves_to_the_island_frame(scenario):
    simulator = Simulator(scenario)
    simulator.apply_command(Command.ESS_TO_VOLTAGE_MODE)
    simulator.apply_command(Command.IC_TO_FORMING)
    simulator.apply_command(Command.OPEN_BREAKER)
    plant = simulator.plant
    assert not plant.breaker_closed
    assert plant.model.bus(0).role is BusRole.AC_PQ
    assert plant.setpoints.vangle[18] == pytest.approx(0.0)
    assert np.angle(plant.state.e_ac[18]) == pytest.approx(0.0)


def test_no_control_run(scenario):
    output = run(with_duration(scenario, 2.0), control=False)
    frame = output.to_frame()
    assert frame.height == 20
    assert set(frame["opf_status"]) == {"off"}
    assert set(frame["state"]) == {OperatingState.GRID_CONNECTED.value}
    assert frame["breaker_closed"].all()
    for column in (
        "p_gcp_w",
        "q_IC1_var",
        "mode_IC2",
        "i_B10-B11_a",
        "v_B01_v",
        "min_voltage_margin_pu",
        "frequency_hz",
        "angle_difference_deg",
        "soc",
        "loadflow_iterations",
    ):
        assert column in frame.columns
    assert frame["v_B01_v"][0] == pytest.approx(400.0)
    assert frame["time"][1] == pytest.approx(0.1)

    summary = output.summary()
    assert summary["ticks"] == 20
    assert summary["transitions"] == []
    assert summary["opf_steps"] == 0
    assert output.timing_frame().height == 0


def test_zero_duration(scenario):
    output = run(with_duration(scenario, 0.0))
    assert output.records == []
    assert output.to_frame().height == 0
    assert output.summary()["ticks"] == 0


def test_controlled_run_is_deterministic(scenario):
    noisy = replace(with_duration(scenario, 2.0), noise_sigma=1e-4)
    first = run(noisy, seed=3)
    second = run(noisy, seed=3)
    assert_frame_equal(first.to_frame(), second.to_frame())
    assert first.summary() == second.summary()

    statuses = first.to_frame()["opf_status"].to_list()
    assert statuses[0] == "ok"
    assert statuses[1] == "skipped"
    assert set(statuses) == {"ok", "skipped"}
    assert first.summary()["opf_steps"] == 2


def test_opf_failure_stops_the_run(scenario, monkeypatch):
    def fail(problem, options=None):
        raise QpMaxIterationsError("KKT residual 1.00e-03 above 1e-06")

    monkeypatch.setattr(sim, "solve_qp", fail)
    with pytest.raises(SimulationError) as info:
        run(with_duration(scenario, 2.0))
    assert info.value.time == 0.0
    assert isinstance(info.value.cause, QpMaxIterationsError)
    assert "t=0.0s" in str(info.value)


def test_prepare_dispatch_solves_the_island_look_ahead(scenario):
    simulator = Simulator(with_duration(scenario, 1.0))
    simulator.machine.state = OperatingState.PREPARE_FOR_ISLAND
    before = simulator.plant.setpoints.copy()
    assert simulator.dispatch() == "ok"
    assert len(simulator.output.timings) == 1
    limits = simulator.device_limits()
    for bus, (lo, hi) in limits.p_bounds.items():
        value = simulator.plant.setpoints.p.get(bus, before.p.get(bus, 0.0))
        assert lo - 1e-6 <= value <= hi + 1e-6


@pytest.mark.slow
def test_bundled_scenario_end_to_end(scenario):
    controlled = run(scenario).summary()
    uncontrolled = run(scenario, control=False).summary()

    assert uncontrolled["ampacity_violation_ticks"] > 0
    assert uncontrolled["transitions"] == []
    assert uncontrolled["monitored_max_current_a"] > 17.0
    assert controlled["monitored_max_current_a"] <= 17.0
    assert controlled["monitored_max_current_a"] <= uncontrolled["monitored_max_current_a"]
    assert controlled["ampacity_violation_ticks"] <= uncontrolled["ampacity_violation_ticks"]

    transitions = controlled["transitions"]
    assert [(t["from"], t["to"]) for t in transitions] == [
        ("grid_connected", "prepare_for_island"),
        ("prepare_for_island", "island"),
        ("island", "resynchronisation"),
        ("resynchronisation", "grid_connected"),
    ]
    assert transitions[0]["time"] == pytest.approx(120.0)
    assert transitions[2]["time"] == pytest.approx(315.0)
    # resynchronised within 90 s of the restore trigger
    assert transitions[3]["time"] - 315.0 <= 90.0
    assert controlled["commands"][-3]["command"] == Command.CLOSE_BREAKER.value
