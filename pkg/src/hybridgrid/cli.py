#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Hybrid Grid CLI

This module provides command-line functionality for the hybridgrid package:

    validate   check a network file
    loadflow   solve one load flow
    sc         compute sensitivity coefficients (optionally check them by finite differences)
    opf        solve one OPF step for a scenario
    simulate   run a scenario
    report     build report tables from a run
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .control import OperatingState
from .converter import LossDerivative
from .errors import HybridGridError, SchemaError
from .export import (
    save_frame_to_csv,
    save_frame_to_parquet,
    save_summary_to_json,
    save_tables_to_csv,
)
from .loadflow import GridState, LoadFlowOptions, SetpointSet, check_balance, network_losses, solve
from .network import load_network, validate
from .opf import build, extract_setpoints, solve_prepare, solve_qp
from .report import companion_path, report
from .sensitivity import SensitivityOptions, compute, finite_difference_check
from .sim import Simulator, load_scenario, run, with_duration
from .utils.io import read_json
from .utils.log import configure_logging

logger = logging.getLogger(__name__)

FD_TOLERANCE = 1e-4


def _loss_mode(value: str) -> LossDerivative:
    return LossDerivative(value)


def _read_state(path: str) -> GridState:
    data = read_json(path)
    try:
        return GridState.from_dict(data.get("state", data))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(path, f"not a grid state: {e}") from e


def _matrix(values: np.ndarray) -> List[List[float]]:
    return [[float(v) for v in row] for row in np.atleast_2d(values)]


def cmd_validate(args: argparse.Namespace) -> int:
    model = load_network(args.network, embed_filters=args.embed_filters)
    problems = validate(model)
    if problems:
        for problem in problems:
            print(f"❌ {problem}")
        return 1
    print(
        f"✅ {args.network}: {model.n_ac} AC buses, {model.n_dc} DC buses, "
        f"{len(model.branches)} branches, {len(model.ic_links)} ICs"
    )
    return 0


def cmd_loadflow(args: argparse.Namespace) -> int:
    model = load_network(args.network)
    setpoints = SetpointSet.from_dict(read_json(args.setpoints))
    initial = _read_state(args.initial) if args.initial else None
    options = LoadFlowOptions(
        tol=args.tol, max_iter=args.max_iter, loss_derivative=_loss_mode(args.loss_derivative)
    )
    result = solve(model, setpoints, initial, options)
    p_ac, q_ac, p_dc = network_losses(model, result.state)
    base = model.base
    print(f"✅ Converged in {result.iterations} iterations (residual {result.residual_norm:.2e})")
    print(
        f"   losses: AC {base.power_to_si(p_ac):.1f} W, {base.power_to_si(q_ac):.1f} var, "
        f"DC {base.power_to_si(p_dc):.1f} W"
    )
    balance = check_balance(model, result.state)
    for entry in balance:
        print(f"   {entry.name}: balance mismatch {entry.mismatch:.2e} p.u.")
    if args.out:
        payload: Dict[str, Any] = {
            "state": result.state.to_dict(),
            "iterations": result.iterations,
            "residual_norm": result.residual_norm,
            "trace": result.trace,
        }
        if not save_summary_to_json(payload, args.out):
            return 1
    return 0


def cmd_sc(args: argparse.Namespace) -> int:
    model = load_network(args.network)
    state = _read_state(args.state)
    options = SensitivityOptions(loss_derivative=_loss_mode(args.loss_derivative))
    scs = compute(model, state, options=options)
    labels = ", ".join(c.label for c in scs.controls)
    print(f"✅ Sensitivities for {len(scs.controls)} controls: {labels}")
    if args.out:
        payload = {
            "controls": [c.label for c in scs.controls],
            "voltage": _matrix(scs.dE_dx),
            "current": _matrix(scs.dI_dx),
            "p_injection": _matrix(scs.dP_dx),
            "q_injection": _matrix(scs.dQ_dx),
            "p_loss": [float(v) for v in scs.dPloss_dx],
            "q_loss": [float(v) for v in scs.dQloss_dx],
        }
        if not save_summary_to_json(payload, args.out):
            return 1
    if not args.check_fd:
        return 0
    errors = finite_difference_check(model, state, step=args.step, options=options)
    worst = max(errors.values(), default=0.0)
    for block, error in errors.items():
        marker = "✅" if error < FD_TOLERANCE else "❌"
        print(f"{marker} {block}: max relative finite-difference error {error:.2e}")
    return 0 if worst < FD_TOLERANCE else 1


def cmd_opf(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    simulator = Simulator(scenario)
    plant = simulator.plant
    state = _read_state(args.state) if args.state else plant.state
    op_state = OperatingState(args.op_state)
    scs = compute(plant.model, state, options=simulator.sc_options)
    limits = simulator.device_limits()
    pair = None
    if op_state is OperatingState.PREPARE_FOR_ISLAND:
        pair = solve_prepare(
            plant.model,
            state,
            scs,
            scenario.weights,
            limits,
            simulator.opf_options,
            prev_setpoints=plant.setpoints,
            lf_options=simulator.lf_options,
            sc_options=simulator.sc_options,
        )
        problem, solution = pair.problem, pair.solution
    else:
        problem = build(
            plant.model,
            state,
            scs,
            op_state,
            scenario.weights,
            limits,
            simulator.opf_options,
            prev_setpoints=plant.setpoints,
        )
        solution = solve_qp(problem, simulator.opf_options)
    commands = extract_setpoints(solution, problem, plant.setpoints)
    print(
        f"✅ OPF {solution.status}: objective {solution.objective:.6g}, "
        f"KKT {solution.kkt.worst:.1e}, {solution.solve_time * 1000:.1f} ms"
    )
    for command in commands:
        print(f"   {command.kind.value}[{command.bus}] = {command.value:.6f}")
    if solution.active_tags:
        print(f"   active: {', '.join(sorted(set(solution.active_tags)))}")
    if pair is not None:
        print(f"   island look-ahead: objective {pair.island_solution.objective:.6g}")
    if args.out:
        payload = {
            "status": solution.status,
            "objective": solution.objective,
            "terms": solution.terms,
            "active": solution.active_tags,
            "island_objective": pair.island_solution.objective if pair else None,
            "setpoints": [
                {"quantity": c.kind.value, "bus": c.bus, "value": c.value} for c in commands
            ],
        }
        if not save_summary_to_json(payload, args.out):
            return 1
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.duration is not None:
        scenario = with_duration(scenario, args.duration)
    output = run(scenario, seed=args.seed, control=not args.no_control)
    summary = output.summary()
    summary["control"] = not args.no_control

    frame = output.to_frame()
    written = [save_frame_to_csv(frame, args.out)]
    written.append(save_summary_to_json(summary, companion_path(args.out, "summary.json")))
    written.append(save_frame_to_csv(output.timing_frame(), companion_path(args.out, "timing.csv")))
    if args.parquet:
        written.append(save_frame_to_parquet(frame, companion_path(args.out, "parquet")))
    if not all(written):
        return 1

    violations = summary.get("ampacity_violation_ticks", 0)
    if violations:
        print(
            f"⚠️ {violations} ticks above the ampacity of {summary['monitored_branch']} "
            f"(max {summary['monitored_max_current_a']:.2f} A)"
        )
    for entry in summary["transitions"]:
        print(f"   t={entry['time']:.1f} s {entry['from']} -> {entry['to']}")
    print(f"✅ Simulated {summary['ticks']} ticks of {scenario.name}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    tables = report(
        args.run,
        no_control_path=args.no_control,
        timing_path=args.timing,
        branch=args.branch,
        limit=args.limit,
    )
    out_dir = args.out_dir or companion_path(args.run, "report")
    written = save_tables_to_csv(tables, out_dir)
    if len(written) != len(tables):
        return 1
    print(f"✅ {len(written)} report tables in {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridgrid", description="Hybrid AC/DC microgrid load flow, OPF and simulation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="Validate a network file")
    p.add_argument("network", help="Network JSON file or bundled name (cigre27)")
    p.add_argument(
        "--embed-filters", action="store_true", help="Embed IC filters before validating"
    )
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("loadflow", help="Solve one load flow")
    p.add_argument("network", help="Network JSON file or bundled name")
    p.add_argument("setpoints", help="Setpoint JSON file (per unit, angles in radians)")
    p.add_argument("--initial", help="Warm-start state JSON file")
    p.add_argument("--tol", type=float, default=1e-8, help="Residual tolerance (p.u.)")
    p.add_argument("--max-iter", type=int, default=50, help="Maximum Newton iterations")
    p.add_argument(
        "--loss-derivative", choices=[m.value for m in LossDerivative], default="full"
    )
    p.add_argument("-o", "--out", help="Write the solved state to this JSON file")
    p.set_defaults(func=cmd_loadflow)

    p = sub.add_parser("sc", help="Compute sensitivity coefficients")
    p.add_argument("network", help="Network JSON file or bundled name")
    p.add_argument("state", help="State JSON file (as written by loadflow --out)")
    p.add_argument("--check-fd", action="store_true", help="Compare against finite differences")
    p.add_argument("--step", type=float, default=1e-5, help="Finite-difference step (p.u.)")
    p.add_argument(
        "--loss-derivative", choices=[m.value for m in LossDerivative], default="full"
    )
    p.add_argument("-o", "--out", help="Write the coefficients to this JSON file")
    p.set_defaults(func=cmd_sc)

    p = sub.add_parser("opf", help="Solve one OPF step")
    p.add_argument("scenario", help="Scenario JSON file or bundled name")
    p.add_argument("--state", help="Operating point JSON file; initial scenario state by default")
    p.add_argument(
        "--op-state",
        choices=[s.value for s in OperatingState],
        default=OperatingState.GRID_CONNECTED.value,
    )
    p.add_argument("-o", "--out", help="Write the solution to this JSON file")
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("simulate", help="Run a scenario")
    p.add_argument("scenario", help="Scenario JSON file or bundled name")
    p.add_argument("-o", "--out", required=True, help="Trajectory CSV file")
    p.add_argument("--no-control", action="store_true", help="Hold the initial setpoints")
    p.add_argument("--seed", type=int, help="Override the scenario seed")
    p.add_argument("--duration", type=float, help="Override the scenario duration (s)")
    p.add_argument("--parquet", action="store_true", help="Also write the trajectory as Parquet")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="Build report tables from a run")
    p.add_argument("run", help="Trajectory written by simulate")
    p.add_argument("--no-control", help="Trajectory of the no-control run")
    p.add_argument("--timing", help="Timing file; <run>.timing.csv by default")
    p.add_argument("--branch", help="Monitored branch label")
    p.add_argument("--limit", type=float, help="Monitored branch limit (A)")
    p.add_argument("--out-dir", help="Output directory; <run>.report by default")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function to run the CLI."""
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.func(args)
    except HybridGridError as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"❌ File not found: {e.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
