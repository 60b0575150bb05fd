#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the operating state machine, synchro-check and angle PI controller.
"""

import pytest

from hybridgrid.control import (
    LEGAL_TRANSITIONS,
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
    angle_pi_step,
    criteria_met,
    step,
    synchro_check,
)
from hybridgrid.errors import ParameterError
from hybridgrid.utils.phasor import wrap_angle_deg

CRITERIA = TransitionCriteria(epsilon_p=0.005, epsilon_q=0.005)

BALANCED = GcpMeasurements(p_gcp=0.001, q_gcp=-0.002, p_forming=0.0, q_forming=0.004)
LOADED = GcpMeasurements(p_gcp=0.08, q_gcp=0.0, p_forming=0.0, q_forming=0.0)

UPSTREAM = Phasor(400.0, 10.0, 50.0)


def _resync(downstream: Phasor) -> GcpMeasurements:
    return GcpMeasurements(0.0, 0.0, 0.0, 0.0, upstream=UPSTREAM, downstream=downstream)


@pytest.mark.parametrize(
    "angle,expected",
    [(0.0, 0.0), (190.0, -170.0), (-180.0, 180.0), (180.0, 180.0), (540.0, 180.0), (-190.0, 170.0)],
)
def test_wrap_angle(angle, expected):
    assert wrap_angle_deg(angle) == pytest.approx(expected)


def test_island_trigger_starts_preparation():
    state, sequence = step(
        OperatingState.GRID_CONNECTED, [ControlEvent.ISLAND_TRIGGER], LOADED, CRITERIA
    )
    assert state is OperatingState.PREPARE_FOR_ISLAND
    assert sequence is None


def test_preparation_waits_for_the_criteria():
    state, sequence = step(OperatingState.PREPARE_FOR_ISLAND, [], LOADED, CRITERIA)
    assert state is OperatingState.PREPARE_FOR_ISLAND
    assert sequence is None


def test_islanding_sequence_when_criteria_met():
    state, sequence = step(OperatingState.PREPARE_FOR_ISLAND, [], BALANCED, CRITERIA)
    assert state is OperatingState.ISLAND
    assert sequence.entries == (
        (0.0, Command.ESS_TO_VOLTAGE_MODE),
        (0.0, Command.IC_TO_FORMING),
        (2.0, Command.OPEN_BREAKER),
    )


def test_forming_power_counts_for_the_criteria():
    measurements = GcpMeasurements(0.0, 0.0, p_forming=0.006, q_forming=0.0)
    assert not criteria_met(measurements, CRITERIA)
    assert criteria_met(BALANCED, CRITERIA)


def test_cancel_returns_to_grid_connected():
    state, sequence = step(
        OperatingState.PREPARE_FOR_ISLAND, [ControlEvent.CANCEL], BALANCED, CRITERIA
    )
    assert state is OperatingState.GRID_CONNECTED
    assert sequence is None


def test_restore_trigger_starts_resynchronisation():
    state, _ = step(OperatingState.ISLAND, [ControlEvent.RESTORE_TRIGGER], BALANCED, CRITERIA)
    assert state is OperatingState.RESYNCHRONISATION


def test_resynchronisation_waits_for_synchro_check():
    state, sequence = step(
        OperatingState.RESYNCHRONISATION, [], _resync(Phasor(400.0, 14.0, 50.0)), CRITERIA
    )
    assert state is OperatingState.RESYNCHRONISATION
    assert sequence is None


def test_resynchronisation_closes_when_in_sync():
    state, sequence = step(
        OperatingState.RESYNCHRONISATION, [], _resync(Phasor(398.0, 11.0, 50.01)), CRITERIA
    )
    assert state is OperatingState.GRID_CONNECTED
    assert sequence.commands == (
        Command.CLOSE_BREAKER,
        Command.IC_TO_FOLLOWING,
        Command.ESS_TO_POWER_MODE,
    )


def test_resynchronisation_without_phasors_stays():
    state, _ = step(OperatingState.RESYNCHRONISATION, [], BALANCED, CRITERIA)
    assert state is OperatingState.RESYNCHRONISATION


@pytest.mark.parametrize(
    "state,event",
    [
        (OperatingState.GRID_CONNECTED, ControlEvent.RESTORE_TRIGGER),
        (OperatingState.GRID_CONNECTED, ControlEvent.CANCEL),
        (OperatingState.ISLAND, ControlEvent.ISLAND_TRIGGER),
        (OperatingState.ISLAND, ControlEvent.CANCEL),
    ],
)
def test_events_out_of_place_are_ignored(state, event):
    new_state, sequence = step(state, [event], LOADED, CRITERIA)
    assert new_state is state
    assert sequence is None


def test_synchro_check_wraps_angles():
    tol = SynchroCheckTolerances()
    assert synchro_check(Phasor(400.0, 179.0, 50.0), Phasor(400.0, -179.0, 50.0), tol)
    assert not synchro_check(Phasor(400.0, 0.0, 50.0), Phasor(400.0, 0.0, 50.03), tol)
    assert not synchro_check(Phasor(400.0, 0.0, 50.0), Phasor(394.0, 0.0, 50.0), tol)


def test_sequence_ordering():
    assert TransitionCommandSequence.islanding().ordering_violations() == []
    assert TransitionCommandSequence.resynchronisation().ordering_violations() == []
    bad = TransitionCommandSequence(
        ((0.0, Command.OPEN_BREAKER), (0.0, Command.IC_TO_FORMING))
    )
    assert "breaker opens before the IC is grid-forming" in bad.ordering_violations()
    late = TransitionCommandSequence(((2.0, Command.IC_TO_FORMING), (0.0, Command.OPEN_BREAKER)))
    assert "delays are not monotonic" in late.ordering_violations()
    early = TransitionCommandSequence(
        ((0.0, Command.IC_TO_FOLLOWING), (0.0, Command.CLOSE_BREAKER))
    )
    assert early.ordering_violations() == [
        "IC leaves grid-forming mode before the breaker closes"
    ]


def test_state_machine_records_transitions():
    machine = StateMachine(criteria=CRITERIA)
    machine.tick(1.0, [ControlEvent.ISLAND_TRIGGER], LOADED)
    sequence = machine.tick(1.1, [], BALANCED)
    assert machine.state is OperatingState.ISLAND
    assert sequence is not None
    assert machine.transitions == [
        (1.0, OperatingState.GRID_CONNECTED, OperatingState.PREPARE_FOR_ISLAND),
        (1.1, OperatingState.PREPARE_FOR_ISLAND, OperatingState.ISLAND),
    ]
    for _, before, after in machine.transitions:
        assert (before, after) in LEGAL_TRANSITIONS


def test_pi_step_is_proportional_at_first():
    pi = PiState(kp=0.002, ki=0.0004, period=0.1)
    output = angle_pi_step(10.0, pi, 0.1)
    assert output == pytest.approx(0.002 * 10.0 + 0.0004 * 1.0)
    assert pi.integral == pytest.approx(1.0)


def test_pi_output_saturates():
    pi = PiState()
    for _ in range(1000):
        output = angle_pi_step(170.0, pi, pi.period)
        assert -pi.f_max <= output <= pi.f_max
    assert output == pytest.approx(pi.f_max)
    assert abs(pi.ki * pi.integral) <= pi.f_max + 1e-12


def test_pi_unwinds_after_saturation():
    pi = PiState()
    for _ in range(1000):
        angle_pi_step(170.0, pi, pi.period)
    wound = pi.integral
    angle_pi_step(-5.0, pi, pi.period)
    assert pi.integral < wound


def test_pi_wraps_the_error():
    pi = PiState()
    assert angle_pi_step(350.0, pi, pi.period) < 0.0


def test_pi_controller_reset():
    controller = PiController(PiState())
    controller.step(20.0)
    assert controller.output > 0.0
    controller.reset()
    assert controller.output == 0.0
    assert controller.state.integral == 0.0


def test_invalid_pi_gains():
    with pytest.raises(ParameterError):
        PiState(kp=-1.0)
    with pytest.raises(ParameterError):
        PiState(period=0.0)


def test_pi_closes_a_large_angle_gap():
    # islanded angle dynamics: the error shrinks as the microgrid runs faster than upstream
    upstream_offset = 0.00231
    tolerances = SynchroCheckTolerances()
    controller = PiController()
    error = 150.0
    for tick in range(900):
        offset = controller.step(error)
        error = wrap_angle_deg(error + 360.0 * (upstream_offset - offset) * 0.1)
        upstream = Phasor(400.0, error, 50.0 + upstream_offset)
        downstream = Phasor(400.0, 0.0, 50.0 + controller.output)
        if synchro_check(upstream, downstream, tolerances):
            break
    else:
        pytest.fail("angle gap not closed within 90 s")
    assert tick * 0.1 < 90.0
    assert abs(error) <= 2.0
