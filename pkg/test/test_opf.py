#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the sensitivity-based OPF: QP solution quality, constraint
provenance and the dispatch on small grids.
"""

import numpy as np
import pytest

import grids
from hybridgrid.control import OperatingState
from hybridgrid.errors import (
    InfeasibleProblemError,
    OperatingStateError,
    QpMaxIterationsError,
    SetpointBoundError,
)
from hybridgrid.loadflow import Quantity, SetpointSet, branch_current_magnitudes, solve
from hybridgrid.network import BusRole, IcMode
from hybridgrid.opf import (
    DeviceLimits,
    OpfOptions,
    OpfProblem,
    OpfWeights,
    SetpointCommand,
    StorageLimits,
    apply_commands,
    build,
    extract_setpoints,
    island_topology,
    look_ahead_island,
    solve_prepare,
    solve_qp,
)
from hybridgrid.sensitivity import compute

AMPACITY = 30.0


def _toy_limits():
    return DeviceLimits(
        p_bounds={3: (0.0, 0.3)},
        q_bounds={1: (-0.45, 0.45)},
        v_bounds={2: (710.0 / 800.0, 730.0 / 800.0)},
        forming_link="IC1",
        gcp_bus=0,
        dc_voltage_ref=0.9,
    )


@pytest.fixture
def congested():
    """DC generation pushing more current through the feeder than it carries."""
    model = grids.grid_connected_toy(ampacity=AMPACITY)
    setpoints = grids.grid_connected_setpoints(p_dc=0.3)
    state = solve(model, setpoints).state
    return model, setpoints, state


def test_projection_qp():
    problem = OpfProblem.from_matrices(
        H=2.0 * np.eye(2), g=np.array([-2.0, -4.0]), A_in=np.array([[1.0, 1.0]]), ub=np.array([1.0])
    )
    solution = solve_qp(problem)
    assert np.allclose(solution.z, [0.0, 1.0], atol=1e-6)
    assert solution.objective == pytest.approx(-3.0, abs=1e-6)
    assert solution.active_tags == ["in0"]
    assert solution.in_multipliers[0] == pytest.approx(2.0, abs=1e-5)
    assert solution.kkt.worst < 1e-6
    assert solution.solve_time >= 0.0


def test_unconstrained_qp():
    problem = OpfProblem.from_matrices(H=np.diag([2.0, 4.0]), g=np.array([-2.0, 4.0]))
    solution = solve_qp(problem)
    assert np.allclose(solution.z, [1.0, -1.0], atol=1e-6)
    assert solution.active_tags == []


def test_equality_constrained_qp():
    problem = OpfProblem.from_matrices(
        H=2.0 * np.eye(2), g=np.zeros(2), A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([2.0])
    )
    solution = solve_qp(problem)
    assert np.allclose(solution.z, [1.0, 1.0], atol=1e-6)
    assert solution.eq_multipliers[0] == pytest.approx(-2.0, abs=1e-5)


def test_crossed_bounds_name_the_row():
    problem = OpfProblem.from_matrices(
        H=np.eye(1),
        g=np.zeros(1),
        A_in=np.array([[1.0]]),
        lb=np.array([2.0]),
        ub=np.array([1.0]),
        in_tags=["soc_limit"],
    )
    with pytest.raises(InfeasibleProblemError) as info:
        solve_qp(problem)
    assert info.value.tag == "soc_limit"


def test_infeasible_rows_are_diagnosed():
    problem = OpfProblem.from_matrices(
        H=np.eye(1),
        g=np.zeros(1),
        A_in=np.array([[1.0], [1.0]]),
        lb=np.array([2.0, -np.inf]),
        ub=np.array([np.inf, 1.0]),
        in_tags=["voltage_limit", "ampacity_limit"],
    )
    with pytest.raises(InfeasibleProblemError) as info:
        solve_qp(problem)
    assert info.value.tag in ("voltage_limit", "ampacity_limit")


def test_problem_rows_carry_provenance(toy, toy_state):
    scs = compute(toy, toy_state)
    problem = build(
        toy, toy_state, scs, OperatingState.GRID_CONNECTED, OpfWeights(), _toy_limits()
    )
    assert [x.label for x in problem.decisions] == ["q[1]", "vdc[2]", "p[3]"]
    assert problem.labels[:3] == ["q[1]", "vdc[2]", "p[3]"]
    assert set(problem.eq_tags) == {
        "slack_p_balance",
        "slack_q_balance",
        "dc_balance",
        "ic_power_mapping:IC1",
    }
    assert "device_p_limit" in problem.in_tags
    assert "setpoint_voltage_limit" in problem.in_tags
    assert "ic_rating:IC1" in problem.in_tags
    assert "ampacity_limit" not in problem.in_tags
    names = {term.name for term in problem.terms}
    assert "w1_gcp_q" in names
    assert "w9_gcp_p" not in names


def test_prepare_for_island_adds_transition_terms(toy, toy_state):
    scs = compute(toy, toy_state)
    problem = build(
        toy, toy_state, scs, OperatingState.PREPARE_FOR_ISLAND, OpfWeights(), _toy_limits()
    )
    names = {term.name for term in problem.terms}
    assert {"w7_forming_p", "w8_forming_q", "w9_gcp_p"} <= names


def test_island_objective_needs_a_forming_ic(toy, toy_state):
    scs = compute(toy, toy_state)
    with pytest.raises(OperatingStateError):
        build(toy, toy_state, scs, OperatingState.ISLAND, OpfWeights(), _toy_limits())


def test_island_problem(island, island_state):
    scs = compute(island, island_state)
    limits = DeviceLimits(
        p_bounds={0: (-0.05, -0.05)},
        v_bounds={1: (0.97, 1.03), 3: (0.8875, 0.9125)},
        forming_link="IC1",
        dc_voltage_ref=0.9,
    )
    problem = build(island, island_state, scs, OperatingState.ISLAND, OpfWeights(), limits)
    assert "forming_p_balance" in problem.eq_tags
    solution = solve_qp(problem)
    commands = extract_setpoints(solution, problem, grids.island_setpoints())
    values = {(c.kind, c.bus): c.value for c in commands}
    assert 0.97 <= values[(Quantity.VMAG, 1)] <= 1.03
    assert values[(Quantity.P, 0)] == pytest.approx(-0.05)


def test_ampacity_limit_is_enforced(congested):
    model, setpoints, state = congested
    base = model.base
    limit_pu = AMPACITY / base.base_current(model.branch_kind(model.branches[0]))
    assert branch_current_magnitudes(model, state)[0] > limit_pu

    scs = compute(model, state)
    options = OpfOptions()
    # with the loss and IC power terms off only the limit moves the generation
    weights = OpfWeights(w2=0.0, w3=0.0)
    problem = build(
        model, state, scs, OperatingState.GRID_CONNECTED, weights, _toy_limits(), options
    )
    assert "ampacity_limit" in problem.in_tags
    solution = solve_qp(problem, options)
    assert "ampacity_limit" in solution.active_tags

    commands = extract_setpoints(solution, problem, setpoints)
    dispatched = apply_commands(setpoints, commands)
    assert dispatched.p[3] < 0.3
    after = solve(model, dispatched, state).state
    assert branch_current_magnitudes(model, after)[0] < limit_pu


def test_storage_soc_row(toy, toy_state):
    scs = compute(toy, toy_state)
    limits = _toy_limits()
    limits.storage = StorageLimits(bus=3, power_max=30000.0, energy_wh=150.0)
    limits.soc = 0.5
    problem = build(toy, toy_state, scs, OperatingState.GRID_CONNECTED, OpfWeights(), limits)
    assert "soc_limit" in problem.in_tags
    assert "w6_soc" in {term.name for term in problem.terms}


def test_extract_setpoints_rejects_out_of_bounds(toy, toy_state):
    scs = compute(toy, toy_state)
    problem = build(
        toy, toy_state, scs, OperatingState.GRID_CONNECTED, OpfWeights(), _toy_limits()
    )
    solution = solve_qp(problem)
    solution.z = solution.z.copy()
    solution.z[2] = 10.0
    with pytest.raises(SetpointBoundError):
        extract_setpoints(solution, problem, grids.grid_connected_setpoints())


def test_apply_commands_leaves_input_untouched():
    setpoints = grids.grid_connected_setpoints()
    result = apply_commands(setpoints, [SetpointCommand(Quantity.P, 3, 0.1)])
    assert result.p[3] == 0.1
    assert setpoints.p[3] == 0.05


def test_weights_from_dict():
    weights = OpfWeights.from_dict({"w6": 10})
    assert weights.w6 == 10.0
    assert weights.w7 == 10.0
    assert weights.w0 == pytest.approx(1e-3)


def test_extract_setpoints_never_clips(toy, toy_state):
    scs = compute(toy, toy_state)
    problem = build(
        toy, toy_state, scs, OperatingState.GRID_CONNECTED, OpfWeights(), _toy_limits()
    )
    solution = solve_qp(problem)
    # p[3] in force far above its bound of 0.3
    setpoints = grids.grid_connected_setpoints().with_value(Quantity.P, 3, 0.8)
    with pytest.raises(SetpointBoundError) as info:
        extract_setpoints(solution, problem, setpoints)
    assert "p[3]" in str(info.value)


def test_bounds_apply_to_the_setpoints_in_force(toy, toy_state):
    setpoints = grids.grid_connected_setpoints().with_value(Quantity.P, 3, 0.35)
    scs = compute(toy, toy_state)
    problem = build(
        toy,
        toy_state,
        scs,
        OperatingState.GRID_CONNECTED,
        OpfWeights(),
        _toy_limits(),
        prev_setpoints=setpoints,
    )
    assert problem.baseline[problem.labels.index("p[3]")] == pytest.approx(0.35)
    solution = solve_qp(problem)
    values = {(c.kind, c.bus): c.value for c in extract_setpoints(solution, problem, setpoints)}
    assert values[(Quantity.P, 3)] <= 0.3 + 1e-6


def test_kkt_residual_above_tolerance_is_an_error():
    problem = OpfProblem.from_matrices(
        H=2.0 * np.eye(2), g=np.array([-2.0, -4.0]), A_in=np.array([[1.0, 1.0]]), ub=np.array([1.0])
    )
    with pytest.raises(QpMaxIterationsError) as info:
        solve_qp(problem, OpfOptions(kkt_tol=-1.0))
    assert "KKT" in str(info.value)


def _cigre27_limits():
    return DeviceLimits(
        p_bounds={14: (-0.2, 0.2), 19: (-0.45, 0.45), 20: (-0.45, 0.45), 24: (-0.02, 0.02)},
        q_bounds={14: (-0.2, 0.2), 18: (-0.45, 0.45), 19: (-0.45, 0.45), 20: (-0.45, 0.45)},
        v_bounds={18: (0.97, 1.03), 21: (0.8875, 0.9125), 24: (0.8875, 0.9125)},
        forming_link="IC1",
        gcp_bus=0,
        ramp=0.045,
        storage=StorageLimits(bus=24, power_max=2000.0, energy_wh=150.0, soc_min=0.3, soc_max=0.7),
        soc=0.5,
        dc_voltage_ref=0.9,
    )


def test_island_topology(cigre27):
    island = island_topology(cigre27, _cigre27_limits())
    assert island.bus(0).role is BusRole.AC_PQ
    assert island.bus(24).role is BusRole.DC_V
    assert island.link("IC1").mode is IcMode.FORMING
    assert island.bus(18).role is BusRole.IC_AC_FORMING


def test_look_ahead_island_moves_the_gcp_power_to_the_forming_ic(cigre27, cigre27_state):
    ahead = look_ahead_island(cigre27, cigre27_state, _cigre27_limits())
    assert ahead.topology == "island"
    setpoints = SetpointSet.from_state(ahead.model, ahead.state)
    assert setpoints.p[0] == pytest.approx(0.0, abs=1e-7)
    assert setpoints.q[0] == pytest.approx(0.0, abs=1e-7)
    # the forming IC holds its terminal voltage across the manoeuvre
    assert abs(ahead.state.e_ac[18]) == pytest.approx(abs(cigre27_state.e_ac[18]))


def test_prepare_solves_both_topologies(cigre27, cigre27_setpoints, cigre27_state):
    scs = compute(cigre27, cigre27_state)
    pair = solve_prepare(
        cigre27,
        cigre27_state,
        scs,
        OpfWeights(),
        _cigre27_limits(),
        prev_setpoints=cigre27_setpoints,
    )
    assert pair.problem.op_state is OperatingState.PREPARE_FOR_ISLAND
    assert {"island_voltage_limit", "island_ampacity_limit"} <= set(pair.problem.in_tags)
    assert pair.island_problem.op_state is OperatingState.ISLAND
    assert "forming_p_balance" in pair.island_problem.eq_tags
    assert "grid_voltage_limit" in pair.island_problem.in_tags
    assert "ramp_transition_ic" not in pair.island_problem.in_tags
    assert pair.solve_time > 0.0

    # the dispatched changes keep the predicted island voltages inside their limits
    problem, z = pair.problem, pair.solution.z
    rows = [i for i, tag in enumerate(problem.in_tags) if tag.startswith("island_")]
    values = problem.A_in[rows] @ z
    assert np.all(values <= problem.ub[rows] + 1e-6)
    assert np.all(values >= problem.lb[rows] - 1e-6)
