#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Sensitivity-based optimal power flow

This module linearises the grid around the measured operating point with the
sensitivity coefficients and dispatches setpoint changes by solving a convex
QP in the variables z = [setpoint changes, derived powers].

Derived powers are the quantities no device sets directly: the GCP slack
powers, the powers of the grid-forming or DC-voltage IC and the DC slack.
They are tied to the decisions by linear balance rows (AC active, AC reactive,
DC active, one power mapping per IC) built from the loss sensitivities.

Every constraint row carries a provenance tag so infeasibility and active
constraints can be reported by name.

While preparing to island, a second problem is solved for the island topology
reached from the measured state. Each of the two problems carries the voltage
and ampacity rows of the other topology, linearised at its own operating point
and restricted to the setpoints both topologies share.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .control import OperatingState
from .errors import (
    InfeasibleProblemError,
    OperatingStateError,
    OpfError,
    QpMaxIterationsError,
    SetpointBoundError,
)
from .loadflow import (
    GridState,
    LoadFlowOptions,
    Quantity,
    SetpointSet,
    branch_current_magnitudes,
    nodal_injections,
    solve,
)
from .network import BusKind, BusRole, IcMode, NetworkModel, ensure_valid
from .sensitivity import (
    ControlVariable,
    SensitivityMatrices,
    SensitivityOptions,
    compute,
    total_losses,
)

logger = logging.getLogger(__name__)

ZERO_ROW = 1e-12


@dataclass(frozen=True)
class OpfWeights:
    """
    Objective weights.

    w1 GCP reactive power, w2 total losses, w3 IC active powers, w4 IC reactive
    powers, w5 voltage reference tracking, w6 storage SoC deviation, w7 and w8
    forming IC active and reactive power (prepare and resynchronisation), w9
    GCP active power (prepare), w0 setpoint change regularisation.
    """

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    w6: float = 1.0
    w7: float = 10.0
    w8: float = 10.0
    w9: float = 10.0
    w0: float = 1e-3

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "OpfWeights":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class StorageLimits:
    """
    Energy storage attached to a bus (DC_P in grid-connected mode, DC_V islanded).

    Attributes:
        bus: Storage bus id
        power_max: Power rating (W)
        energy_wh: Usable energy (Wh)
        efficiency: Efficiency applied to the SoC update
        soc_min: Lower SoC bound
        soc_max: Upper SoC bound
        soc_ref: SoC reference
    """

    bus: int
    power_max: float
    energy_wh: float
    efficiency: float = 1.0
    soc_min: float = 0.1
    soc_max: float = 0.9
    soc_ref: float = 0.5


@dataclass
class DeviceLimits:
    """
    Controllable setpoints and their bounds, per unit.

    Only quantities listed here become OPF decisions.

    Attributes:
        p_bounds: bus -> (min, max) active injection
        q_bounds: bus -> (min, max) reactive injection
        v_bounds: bus -> (min, max) voltage setpoint (AC magnitude or DC voltage)
        forming_link: IC that forms the island voltage
        gcp_bus: Grid connection point bus
        ramp: Max change of the transition IC active power per control step
        time_step: Control period (s)
        storage: Storage model, if any
        soc: Storage SoC at the current step
        dc_voltage_ref: DC voltage reference
    """

    p_bounds: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    q_bounds: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    v_bounds: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    forming_link: str = ""
    gcp_bus: int = 0
    ramp: float = np.inf
    time_step: float = 1.0
    storage: Optional[StorageLimits] = None
    soc: float = 0.5
    dc_voltage_ref: float = 1.0

    def bounds_for(self, control: ControlVariable) -> Optional[Tuple[float, float]]:
        if control.kind is Quantity.P:
            return self.p_bounds.get(control.bus)
        if control.kind is Quantity.Q:
            return self.q_bounds.get(control.bus)
        if control.kind in (Quantity.VMAG, Quantity.VDC):
            return self.v_bounds.get(control.bus)
        return None


@dataclass(frozen=True)
class OpfOptions:
    """
    Attributes:
        ampacity_margin: Fraction of the ampacity used as the current limit
        power_norm: Power normalisation (p.u.); largest IC rating when None
        solver: cvxpy solver name
        polish: Refine the solver output by an equality-constrained KKT solve
        kkt_tol: Tolerance used to accept the polished point
    """

    ampacity_margin: float = 0.95
    power_norm: Optional[float] = None
    solver: str = "CLARABEL"
    polish: bool = True
    kkt_tol: float = 1e-6


@dataclass(frozen=True)
class ObjectiveTerm:
    """One squared term: scale * (offset + coeffs . z)^2."""

    name: str
    scale: float
    offset: float
    coeffs: np.ndarray


@dataclass
class OpfProblem:
    """
    QP  min 1/2 z'Hz + g'z + const  s.t.  A_eq z = b_eq,  lb <= A_in z <= ub.

    The first n_decisions entries of z are setpoint changes of `decisions`.
    """

    labels: List[str]
    n_decisions: int
    decisions: List[ControlVariable]
    baseline: np.ndarray
    decision_bounds: List[Tuple[float, float]]
    terms: List[ObjectiveTerm]
    A_eq: np.ndarray
    b_eq: np.ndarray
    eq_tags: List[str]
    A_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    in_tags: List[str]
    op_state: Optional[OperatingState] = None
    linear: Optional[np.ndarray] = None
    H: np.ndarray = field(init=False)
    g: np.ndarray = field(init=False)
    const: float = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.labels)
        self.H = np.zeros((n, n))
        self.g = np.zeros(n)
        self.const = 0.0
        for term in self.terms:
            self.H += 2.0 * term.scale * np.outer(term.coeffs, term.coeffs)
            self.g += 2.0 * term.scale * term.offset * term.coeffs
            self.const += term.scale * term.offset**2
        if self.linear is not None:
            self.g += self.linear

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def from_matrices(
        cls,
        H: np.ndarray,
        g: np.ndarray,
        A_eq: Optional[np.ndarray] = None,
        b_eq: Optional[np.ndarray] = None,
        A_in: Optional[np.ndarray] = None,
        lb: Optional[np.ndarray] = None,
        ub: Optional[np.ndarray] = None,
        in_tags: Optional[Sequence[str]] = None,
    ) -> "OpfProblem":
        """A bare QP with H positive semidefinite, for direct use of solve_qp."""
        H = np.atleast_2d(np.asarray(H, dtype=float))
        g = np.asarray(g, dtype=float)
        n = len(g)
        # factor H = 2 R'R so the problem keeps its sum-of-squares form
        eigval, eigvec = np.linalg.eigh(0.5 * (H + H.T))
        eigval = np.clip(eigval, 0.0, None)
        terms = [
            ObjectiveTerm(f"h{i}", 1.0, 0.0, np.sqrt(eigval[i] / 2.0) * eigvec[:, i])
            for i in range(n)
            if eigval[i] > 0
        ]
        A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq)
        A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(A_in)
        m = A_in.shape[0]
        problem = cls(
            labels=[f"z{i}" for i in range(n)],
            n_decisions=n,
            decisions=[],
            baseline=np.zeros(n),
            decision_bounds=[(-np.inf, np.inf)] * n,
            terms=terms,
            A_eq=A_eq,
            b_eq=np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float),
            eq_tags=[f"eq{i}" for i in range(A_eq.shape[0])],
            A_in=A_in,
            lb=np.full(m, -np.inf) if lb is None else np.asarray(lb, dtype=float),
            ub=np.full(m, np.inf) if ub is None else np.asarray(ub, dtype=float),
            in_tags=list(in_tags) if in_tags else [f"in{i}" for i in range(m)],
            linear=g,
        )
        return problem

    def objective_value(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z + self.const)

    def term_values(self, z: np.ndarray) -> Dict[str, float]:
        values: Dict[str, float] = {}
        for term in self.terms:
            values[term.name] = values.get(term.name, 0.0) + term.scale * float(
                term.offset + term.coeffs @ z
            ) ** 2
        return values


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass
class OpfSolution:
    z: np.ndarray
    objective: float
    terms: Dict[str, float]
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    active_tags: List[str]
    kkt: KktReport
    status: str
    solve_time: float
    polished: bool

    def delta(self, problem: OpfProblem) -> Dict[ControlVariable, float]:
        return {x: float(self.z[i]) for i, x in enumerate(problem.decisions)}


@dataclass(frozen=True)
class SetpointCommand:
    """Absolute setpoint for a device quantity, per unit (angles in radians)."""

    kind: Quantity
    bus: int
    value: float


@dataclass(frozen=True)
class Linearisation:
    """An operating point of one topology with its sensitivities."""

    model: NetworkModel
    state: GridState
    scs: SensitivityMatrices

    @property
    def topology(self) -> str:
        return "grid" if self.model.buses_with_role(BusRole.AC_SLACK) else "island"


class _Affine:
    """const + coef . z"""

    def __init__(self, const: float, coef: np.ndarray):
        self.const = float(const)
        self.coef = coef

    def __add__(self, other: "_Affine") -> "_Affine":
        return _Affine(self.const + other.const, self.coef + other.coef)

    def __sub__(self, other: "_Affine") -> "_Affine":
        return _Affine(self.const - other.const, self.coef - other.coef)

    def __neg__(self) -> "_Affine":
        return _Affine(-self.const, -self.coef)

    def shifted(self, value: float) -> "_Affine":
        return _Affine(self.const + value, self.coef)


class _ProblemBuilder:
    """Collects variables, rows and terms of one OPF instance."""

    def __init__(self, decisions: Sequence[ControlVariable]):
        self.labels = [x.label for x in decisions]
        self.n_decisions = len(decisions)
        self._eq: List[Tuple[_Affine, str]] = []
        self._in: List[Tuple[_Affine, float, float, str]] = []
        self.terms: List[Tuple[str, float, _Affine]] = []

    def aux(self, label: str) -> int:
        self.labels.append(label)
        return len(self.labels) - 1

    def unit(self, index: int) -> _Affine:
        coef = np.zeros(len(self.labels))
        coef[index] = 1.0
        return _Affine(0.0, coef)

    def zero(self) -> _Affine:
        return _Affine(0.0, np.zeros(len(self.labels)))

    def sensitivity(self, row: np.ndarray, columns: Sequence[int]) -> _Affine:
        coef = np.zeros(len(self.labels))
        coef[: self.n_decisions] = row[list(columns)] if columns else 0.0
        return _Affine(0.0, coef)

    def equal(self, expr: _Affine, tag: str) -> None:
        self._eq.append((expr, tag))

    def bound(self, expr: _Affine, lo: float, hi: float, tag: str) -> None:
        self._in.append((expr, lo, hi, tag))

    def penalise(self, name: str, weight: float, norm: float, expr: _Affine) -> None:
        if weight > 0:
            self.terms.append((name, weight / norm**2, expr))

    def _pad(self, coef: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.labels))
        out[: len(coef)] = coef
        return out

    def finish(self, **kwargs: Any) -> OpfProblem:
        n = len(self.labels)
        a_eq = np.array([self._pad(e.coef) for e, _ in self._eq]).reshape(-1, n)
        b_eq = np.array([-e.const for e, _ in self._eq])
        a_in = np.array([self._pad(e.coef) for e, _, _, _ in self._in]).reshape(-1, n)
        lb = np.array([lo - e.const for e, lo, _, _ in self._in])
        ub = np.array([hi - e.const for e, _, hi, _ in self._in])
        terms = [ObjectiveTerm(name, s, e.const, self._pad(e.coef)) for name, s, e in self.terms]
        return OpfProblem(
            labels=list(self.labels),
            n_decisions=self.n_decisions,
            terms=terms,
            A_eq=a_eq,
            b_eq=b_eq,
            eq_tags=[tag for _, tag in self._eq],
            A_in=a_in,
            lb=lb,
            ub=ub,
            in_tags=[tag for _, _, _, tag in self._in],
            **kwargs,
        )


def _transition_link(model: NetworkModel, limits: DeviceLimits):
    try:
        return model.link(limits.forming_link)
    except KeyError:
        return None


def island_topology(model: NetworkModel, limits: DeviceLimits) -> NetworkModel:
    """Roles after the islanding commands: storage in voltage mode, forming IC, open GCP."""
    roles = {limits.gcp_bus: BusRole.AC_PQ}
    if limits.storage is not None:
        roles[limits.storage.bus] = BusRole.DC_V
    return model.with_link_mode(limits.forming_link, IcMode.FORMING).with_roles(roles)


def look_ahead_island(
    model: NetworkModel,
    state: GridState,
    limits: DeviceLimits,
    lf_options: Optional[LoadFlowOptions] = None,
    sc_options: Optional[SensitivityOptions] = None,
) -> Linearisation:
    """
    Island operating point reached from state if the breaker opened now.

    The forming IC keeps its terminal voltage, the storage its DC voltage and the
    GCP injection drops to zero; every other injection is held.

    Raises:
        ModelValidationError: if the island roles are not a valid topology
        LoadFlowError: if the island load flow fails
        SensitivityError: if the island sensitivities cannot be computed
    """
    island = ensure_valid(island_topology(model, limits))
    setpoints = SetpointSet.from_state(island, state)
    setpoints.p[limits.gcp_bus] = 0.0
    setpoints.q[limits.gcp_bus] = 0.0
    predicted = solve(island, setpoints, state, lf_options).state
    return Linearisation(island, predicted, compute(island, predicted, options=sc_options))


def _add_counterpart_rows(
    builder: _ProblemBuilder,
    decisions: Sequence[ControlVariable],
    counterpart: Linearisation,
    options: OpfOptions,
) -> None:
    """Voltage and ampacity rows of the other topology over the shared decisions."""
    model, state, scs = counterpart.model, counterpart.state, counterpart.scs
    shared = [(i, scs.controls.index(x)) for i, x in enumerate(decisions) if x in scs.controls]
    prefix = counterpart.topology

    def row(values: np.ndarray) -> _Affine:
        coef = np.zeros(len(builder.labels))
        for index, column in shared:
            coef[index] = values[column]
        return _Affine(0.0, coef)

    v_lo, v_hi = model.voltage_limits_pu()
    magnitudes = state.magnitudes()
    for bus_id in range(len(model.buses)):
        expr = row(scs.dE_dx[bus_id])
        if np.max(np.abs(expr.coef), initial=0.0) < ZERO_ROW:
            continue
        builder.bound(
            expr.shifted(magnitudes[bus_id]), v_lo[bus_id], v_hi[bus_id], f"{prefix}_voltage_limit"
        )

    i_max = model.ampacity_pu() * options.ampacity_margin
    i_now = branch_current_magnitudes(model, state)
    for index in range(len(model.branches)):
        if not np.isfinite(i_max[index]):
            continue
        expr = row(scs.dI_dx[index])
        if np.max(np.abs(expr.coef), initial=0.0) < ZERO_ROW:
            continue
        builder.bound(expr.shifted(i_now[index]), -np.inf, i_max[index], f"{prefix}_ampacity_limit")


def build(
    model: NetworkModel,
    state: GridState,
    scs: SensitivityMatrices,
    op_state: OperatingState,
    weights: OpfWeights,
    limits: DeviceLimits,
    options: Optional[OpfOptions] = None,
    prev_setpoints: Optional[SetpointSet] = None,
    counterpart: Optional[Linearisation] = None,
) -> OpfProblem:
    """
    Assemble the QP for the current operating state.

    Args:
        model: Network model with the roles in force
        state: Measured operating point
        scs: Sensitivities at state
        op_state: Operating state, selects objective terms and ramp target
        weights: Objective weights
        limits: Controllable setpoints and device bounds
        options: Normalisation and margins
        prev_setpoints: Setpoints in force; the device bounds apply to these plus
            the change. The measured values are used when omitted.
        counterpart: The other topology's operating point; adds its voltage and
            ampacity rows over the shared setpoints

    Raises:
        OperatingStateError: if the topology does not fit op_state
    """
    options = options or OpfOptions()
    base = model.base
    roles = {b.id: b.role for b in model.buses}
    has_slack = BusRole.AC_SLACK in roles.values()
    forming = [l for l in model.ic_links if l.mode is IcMode.FORMING]
    islanded = op_state in (OperatingState.ISLAND, OperatingState.RESYNCHRONISATION)
    if has_slack and forming:
        raise OperatingStateError("OPF is not defined while slack and forming IC coexist")
    if islanded and not forming:
        raise OperatingStateError(f"{op_state.value} objective with no forming IC")
    if not islanded and not has_slack:
        raise OperatingStateError(f"{op_state.value} requires the GCP slack bus")

    power_norm = options.power_norm or max(
        [base.power_to_pu(l.rating) for l in model.ic_links] or [1.0]
    )

    decisions = [x for x in scs.controls if limits.bounds_for(x) is not None]
    columns = [scs.column(x) for x in decisions]
    builder = _ProblemBuilder(decisions)

    s_ac, p_dc = nodal_injections(model, state)
    magnitudes = state.magnitudes()
    n_ac = model.n_ac

    baseline = []
    decision_bounds = []
    for index, x in enumerate(decisions):
        if x.kind is Quantity.P:
            value = s_ac[x.bus].real if x.bus < n_ac else p_dc[x.bus - n_ac]
        elif x.kind is Quantity.Q:
            value = s_ac[x.bus].imag
        else:
            value = magnitudes[x.bus]
        if prev_setpoints is not None:
            value = prev_setpoints.get(x.kind, x.bus, value)
        lo, hi = limits.bounds_for(x)
        baseline.append(float(value))
        decision_bounds.append((lo, hi))

    # Derived quantities
    decision_index = {x: i for i, x in enumerate(decisions)}
    delta_p: Dict[int, _Affine] = {}
    delta_q: Dict[int, _Affine] = {}
    derived: Dict[Tuple[str, int], int] = {}
    for b in model.buses:
        if b.kind is BusKind.AC:
            if b.role in (BusRole.AC_SLACK, BusRole.IC_AC_FORMING):
                derived[("p", b.id)] = builder.aux(f"p[{b.id}]")
                derived[("q", b.id)] = builder.aux(f"q[{b.id}]")
            elif b.role is BusRole.IC_AC_VOLTAGE:
                derived[("p", b.id)] = builder.aux(f"p[{b.id}]")
        elif b.role in (
            BusRole.DC_V,
            BusRole.IC_DC_POWER,
            BusRole.IC_DC_VOLTAGE,
            BusRole.IC_DC_FORMING,
        ):
            derived[("p", b.id)] = builder.aux(f"p[{b.id}]")

    for b in model.buses:
        for quantity, table in ((Quantity.P, delta_p), (Quantity.Q, delta_q)):
            if quantity is Quantity.Q and b.kind is BusKind.DC:
                continue
            key = (quantity.value, b.id)
            if key in derived:
                table[b.id] = builder.unit(derived[key])
            elif ControlVariable(quantity, b.id) in decision_index:
                table[b.id] = builder.unit(decision_index[ControlVariable(quantity, b.id)])
            else:
                table[b.id] = builder.zero()

    def sc(row: np.ndarray) -> _Affine:
        return builder.sensitivity(row, columns)

    d_loss_ac = sc(scs.dPloss_ac_dx)
    d_qloss = sc(scs.dQloss_dx)
    d_loss_dc = sc(scs.dPloss_dc_dx)
    d_loss_ic = [sc(scs.dPloss_ic_dx[i]) for i in range(len(model.ic_links))]

    ac_ids = [b.id for b in model.ac_buses]
    dc_ids = [b.id for b in model.dc_buses]
    balance = "slack" if has_slack else "forming"
    sum_p_ac = builder.zero()
    sum_q_ac = builder.zero()
    for a in ac_ids:
        sum_p_ac = sum_p_ac + delta_p[a]
        sum_q_ac = sum_q_ac + delta_q[a]
    sum_p_dc = builder.zero()
    for m in dc_ids:
        sum_p_dc = sum_p_dc + delta_p[m]
    builder.equal(sum_p_ac - d_loss_ac, f"{balance}_p_balance")
    builder.equal(sum_q_ac - d_qloss, f"{balance}_q_balance")
    builder.equal(sum_p_dc - d_loss_dc, "dc_balance")
    for link, d_loss in zip(model.ic_links, d_loss_ic):
        builder.equal(
            delta_p[link.ac_bus] + delta_p[link.dc_bus] + d_loss, f"ic_power_mapping:{link.name}"
        )

    def p_abs(bus: int) -> _Affine:
        p0 = s_ac[bus].real if bus < n_ac else p_dc[bus - n_ac]
        return delta_p[bus].shifted(float(p0))

    def q_abs(bus: int) -> _Affine:
        return delta_q[bus].shifted(float(s_ac[bus].imag))

    # Constraints
    v_lo, v_hi = model.voltage_limits_pu()
    for bus_id in range(len(model.buses)):
        expr = sc(scs.dE_dx[bus_id])
        if np.max(np.abs(expr.coef), initial=0.0) < ZERO_ROW:
            continue
        builder.bound(expr.shifted(magnitudes[bus_id]), v_lo[bus_id], v_hi[bus_id], "voltage_limit")

    i_max = model.ampacity_pu() * options.ampacity_margin
    i_now = branch_current_magnitudes(model, state)
    for index, br in enumerate(model.branches):
        if not np.isfinite(i_max[index]):
            continue
        expr = sc(scs.dI_dx[index])
        if np.max(np.abs(expr.coef), initial=0.0) < ZERO_ROW:
            continue
        builder.bound(expr.shifted(i_now[index]), -np.inf, i_max[index], "ampacity_limit")

    for index, x in enumerate(decisions):
        lo, hi = decision_bounds[index]
        tag = {
            Quantity.P: "device_p_limit",
            Quantity.Q: "device_q_limit",
        }.get(x.kind, "setpoint_voltage_limit")
        builder.bound(builder.unit(index).shifted(baseline[index]), lo, hi, tag)

    for link in model.ic_links:
        rating = base.power_to_pu(link.rating)
        if ("p", link.ac_bus) in derived:
            builder.bound(p_abs(link.ac_bus), -rating, rating, f"ic_rating:{link.name}")
        if ("q", link.ac_bus) in derived:
            builder.bound(q_abs(link.ac_bus), -rating, rating, f"ic_rating:{link.name}")

    storage = limits.storage
    soc_expr = None
    if storage is not None:
        p_ess = p_abs(storage.bus)
        if ("p", storage.bus) in derived:
            p_hat = base.power_to_pu(storage.power_max)
            builder.bound(p_ess, -p_hat, p_hat, "storage_p_limit")
        k = storage.efficiency * limits.time_step * base.base_power / (3600.0 * storage.energy_wh)
        soc_expr = _Affine(limits.soc - k * p_ess.const, -k * p_ess.coef)
        builder.bound(soc_expr, storage.soc_min, storage.soc_max, "soc_limit")

    if counterpart is not None:
        _add_counterpart_rows(builder, decisions, counterpart, options)

    transition = _transition_link(model, limits)
    if transition is not None and np.isfinite(limits.ramp):
        builder.bound(delta_p[transition.ac_bus], -limits.ramp, limits.ramp, "ramp_transition_ic")

    # Objective
    total_loss0, _ = total_losses(model, state)
    if has_slack:
        builder.penalise("w1_gcp_q", weights.w1, power_norm, q_abs(limits.gcp_bus))
    d_loss_total = d_loss_ac + d_loss_dc
    for d_loss in d_loss_ic:
        d_loss_total = d_loss_total + d_loss
    builder.penalise("w2_losses", weights.w2, power_norm, d_loss_total.shifted(total_loss0))
    for link in model.ic_links:
        builder.penalise("w3_ic_p", weights.w3, power_norm, p_abs(link.ac_bus))
        builder.penalise("w4_ic_q", weights.w4, power_norm, q_abs(link.ac_bus))
    for b in model.dc_buses:
        expr = sc(scs.dE_dx[b.id]).shifted(magnitudes[b.id] - limits.dc_voltage_ref)
        builder.penalise("w5_voltage", weights.w5, limits.dc_voltage_ref, expr)
    for index, x in enumerate(decisions):
        if x.kind is Quantity.VMAG:
            expr = builder.unit(index).shifted(baseline[index] - 1.0)
            builder.penalise("w5_voltage", weights.w5, 1.0, expr)
    if soc_expr is not None:
        builder.penalise(
            "w6_soc",
            weights.w6,
            storage.soc_max - storage.soc_min,
            soc_expr.shifted(-storage.soc_ref),
        )
    if op_state in (OperatingState.PREPARE_FOR_ISLAND, OperatingState.RESYNCHRONISATION):
        if transition is not None:
            builder.penalise("w7_forming_p", weights.w7, power_norm, p_abs(transition.ac_bus))
            builder.penalise("w8_forming_q", weights.w8, power_norm, q_abs(transition.ac_bus))
    if op_state is OperatingState.PREPARE_FOR_ISLAND:
        builder.penalise("w9_gcp_p", weights.w9, power_norm, p_abs(limits.gcp_bus))
    for index, x in enumerate(decisions):
        norm = power_norm if x.kind in (Quantity.P, Quantity.Q) else 1.0
        builder.penalise("w0_regularisation", weights.w0, norm, builder.unit(index))

    problem = builder.finish(
        decisions=decisions,
        baseline=np.array(baseline),
        decision_bounds=decision_bounds,
        op_state=op_state,
    )
    logger.debug(
        "OPF %s: %d decisions, %d aux, %d eq, %d ineq",
        op_state.value,
        len(decisions),
        problem.size - len(decisions),
        len(problem.eq_tags),
        len(problem.in_tags),
    )
    return problem


def _stack(blocks: Sequence[np.ndarray], width: int) -> np.ndarray:
    blocks = [b for b in blocks if b.size]
    return np.vstack(blocks) if blocks else np.zeros((0, width))


def _near(gap: float, bound: float, tol: float) -> bool:
    return np.isfinite(bound) and gap <= tol * max(1.0, abs(bound))


def _kkt(
    problem: OpfProblem, z: np.ndarray, active_tol: float
) -> Tuple[np.ndarray, np.ndarray, KktReport, List[int], List[int]]:
    """Multipliers and residuals for z with the active set detected at active_tol."""
    a_in = problem.A_in
    values = a_in @ z if a_in.size else np.zeros(0)
    upper = [
        i for i in range(len(values)) if _near(problem.ub[i] - values[i], problem.ub[i], active_tol)
    ]
    lower = [
        i
        for i in range(len(values))
        if i not in upper and _near(values[i] - problem.lb[i], problem.lb[i], active_tol)
    ]
    w = _stack([problem.A_eq, a_in[upper], a_in[lower]], len(z))
    gradient = problem.H @ z + problem.g
    lam = np.zeros(0)
    if w.shape[0]:
        lam, *_ = np.linalg.lstsq(w.T, -gradient, rcond=None)
    n_eq = problem.A_eq.shape[0]
    nu = lam[:n_eq]
    mu = np.zeros(len(values))
    mu[upper] = lam[n_eq : n_eq + len(upper)]
    mu[lower] = lam[n_eq + len(upper) :]

    stationarity = float(np.max(np.abs(gradient + w.T @ lam), initial=0.0))
    residuals = [np.zeros(0)]
    if n_eq:
        residuals.append(np.abs(problem.A_eq @ z - problem.b_eq))
    if len(values):
        residuals.append(np.maximum(values - problem.ub, 0.0))
        residuals.append(np.maximum(problem.lb - values, 0.0))
    primal = float(np.max(np.concatenate(residuals), initial=0.0))
    dual = float(max(np.max(-mu[upper], initial=0.0), np.max(mu[lower], initial=0.0)))
    complementarity = 0.0
    if len(values):
        slack = np.where(mu >= 0, problem.ub - values, values - problem.lb)
        slack = np.where(np.isfinite(slack), slack, 0.0)
        complementarity = float(np.max(np.abs(mu * slack), initial=0.0))
    return nu, mu, KktReport(stationarity, primal, dual, complementarity), upper, lower


def _polish(problem: OpfProblem, upper: List[int], lower: List[int]) -> Optional[np.ndarray]:
    """Solve the equality-constrained KKT system on the given active set."""
    a_in = problem.A_in
    w = _stack([problem.A_eq, a_in[upper], a_in[lower]], problem.size)
    t = np.concatenate([problem.b_eq, problem.ub[upper], problem.lb[lower]])
    n, m = problem.size, w.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = problem.H
    kkt[:n, n:] = w.T
    kkt[n:, :n] = w
    rhs = np.concatenate([-problem.g, t])
    try:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return None
    return sol[:n]


def _diagnose_infeasible(problem: OpfProblem) -> InfeasibleProblemError:
    """Elastic LP: the row needing the largest slack names the infeasibility."""
    n = problem.size
    z = cp.Variable(n)
    m_in, m_eq = problem.A_in.shape[0], problem.A_eq.shape[0]
    s_up = cp.Variable(m_in, nonneg=True)
    s_lo = cp.Variable(m_in, nonneg=True)
    s_eq = cp.Variable(m_eq)
    constraints = []
    if m_eq:
        constraints.append(problem.A_eq @ z - problem.b_eq == s_eq)
    ub = np.where(np.isfinite(problem.ub), problem.ub, 1e9)
    lb = np.where(np.isfinite(problem.lb), problem.lb, -1e9)
    if m_in:
        constraints += [problem.A_in @ z <= ub + s_up, problem.A_in @ z >= lb - s_lo]
    objective = cp.sum(s_up) + cp.sum(s_lo) + (cp.norm1(s_eq) if m_eq else 0)
    cp.Problem(cp.Minimize(objective), constraints).solve()
    slack = []
    if m_in:
        slack += [(float(v), problem.in_tags[i]) for i, v in enumerate(s_up.value + s_lo.value)]
    if m_eq:
        slack += [(abs(float(v)), problem.eq_tags[i]) for i, v in enumerate(s_eq.value)]
    if not slack:
        return InfeasibleProblemError("unknown")
    violation, tag = max(slack, key=lambda item: item[0])
    return InfeasibleProblemError(tag, violation)


def solve_qp(problem: OpfProblem, options: Optional[OpfOptions] = None) -> OpfSolution:
    """
    Solve the QP with cvxpy and refine the result on the detected active set.

    Raises:
        InfeasibleProblemError: with the provenance tag of the most violated row
        QpMaxIterationsError: if the solver stops early or the KKT residual of the
            returned point is above options.kkt_tol
    """
    options = options or OpfOptions()
    for i in range(len(problem.in_tags)):
        if problem.lb[i] > problem.ub[i] + 1e-12:
            raise InfeasibleProblemError(problem.in_tags[i], problem.lb[i] - problem.ub[i])

    started = time.perf_counter()
    z = cp.Variable(problem.size)
    objective = 0
    if problem.terms:
        factor = np.array([np.sqrt(t.scale) * t.coeffs for t in problem.terms])
        offset = np.array([np.sqrt(t.scale) * t.offset for t in problem.terms])
        objective = cp.sum_squares(factor @ z + offset)
    if problem.linear is not None:
        objective = objective + problem.linear @ z
    constraints = []
    if problem.A_eq.shape[0]:
        constraints.append(problem.A_eq @ z == problem.b_eq)
    finite_ub = np.isfinite(problem.ub)
    finite_lb = np.isfinite(problem.lb)
    if finite_ub.any():
        constraints.append(problem.A_in[finite_ub] @ z <= problem.ub[finite_ub])
    if finite_lb.any():
        constraints.append(problem.A_in[finite_lb] @ z >= problem.lb[finite_lb])
    qp = cp.Problem(cp.Minimize(objective), constraints)
    solver = options.solver if options.solver in cp.installed_solvers() else None
    try:
        qp.solve(solver=solver)
    except cp.error.SolverError as e:
        raise QpMaxIterationsError(str(e)) from e

    if qp.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise _diagnose_infeasible(problem)
    if qp.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise OpfError("OPF problem is unbounded")
    if qp.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or z.value is None:
        raise QpMaxIterationsError(f"QP solver stopped with status {qp.status}")

    z_value = np.asarray(z.value, dtype=float)
    nu, mu, report, upper, lower = _kkt(problem, z_value, 1e-7)
    polished = False
    if options.polish:
        candidate = _polish(problem, upper, lower)
        if candidate is not None:
            c_nu, c_mu, c_report, _, _ = _kkt(problem, candidate, 1e-7)
            if c_report.worst < min(report.worst, options.kkt_tol):
                z_value, nu, mu, report, polished = candidate, c_nu, c_mu, c_report, True
    elapsed = time.perf_counter() - started

    active = [problem.in_tags[i] for i in upper + lower]
    if report.worst > options.kkt_tol:
        raise QpMaxIterationsError(
            f"KKT residual {report.worst:.2e} above {options.kkt_tol:.0e} (status {qp.status})"
        )
    return OpfSolution(
        z=z_value,
        objective=problem.objective_value(z_value),
        terms=problem.term_values(z_value),
        eq_multipliers=nu,
        in_multipliers=mu,
        active_tags=active,
        kkt=report,
        status=qp.status,
        solve_time=elapsed,
        polished=polished,
    )


def extract_setpoints(
    solution: OpfSolution,
    problem: OpfProblem,
    prev_setpoints: SetpointSet,
    tol: float = 1e-6,
) -> List[SetpointCommand]:
    """
    Absolute setpoints from the optimal changes.

    The change is applied to the setpoint in force. The result is never clipped:
    a value outside the device bounds means the problem was built around other
    setpoints and is reported as an error.

    Args:
        solution: QP solution
        problem: The problem solved
        prev_setpoints: Setpoints in force at the linearisation point
        tol: Bound tolerance

    Raises:
        SetpointBoundError: if a dispatched setpoint leaves its device bounds
    """
    commands = []
    for index, x in enumerate(problem.decisions):
        change = float(solution.z[index])
        lo, hi = problem.decision_bounds[index]
        value = prev_setpoints.get(x.kind, x.bus, problem.baseline[index]) + change
        if value < lo - tol or value > hi + tol:
            raise SetpointBoundError(f"{x.label} = {value:.6f} outside [{lo:.6f}, {hi:.6f}]")
        commands.append(SetpointCommand(x.kind, x.bus, float(value)))
    return commands


def apply_commands(setpoints: SetpointSet, commands: Sequence[SetpointCommand]) -> SetpointSet:
    result = setpoints.copy()
    for command in commands:
        result.table(command.kind)[command.bus] = command.value
    return result


@dataclass
class PrepareSolution:
    """The pair of problems solved while preparing to island."""

    problem: OpfProblem
    solution: OpfSolution
    island: Linearisation
    island_problem: OpfProblem
    island_solution: OpfSolution

    @property
    def solve_time(self) -> float:
        return self.solution.solve_time + self.island_solution.solve_time


def solve_prepare(
    model: NetworkModel,
    state: GridState,
    scs: SensitivityMatrices,
    weights: OpfWeights,
    limits: DeviceLimits,
    options: Optional[OpfOptions] = None,
    prev_setpoints: Optional[SetpointSet] = None,
    lf_options: Optional[LoadFlowOptions] = None,
    sc_options: Optional[SensitivityOptions] = None,
) -> PrepareSolution:
    """
    Grid-connected and island look-ahead OPFs for the prepare-for-island state.

    The grid-connected problem is the one dispatched. It must keep the predicted
    island voltages and currents inside their limits; the island problem in turn
    must keep the grid-connected ones, so a feasible pair certifies that the
    breaker can open without a limit violation on either side. The island problem
    has no ramp row since it is not dispatched.

    Raises:
        OpfError: if either problem is infeasible or inaccurate
        LoadFlowError: if the island look-ahead load flow fails
    """
    options = options or OpfOptions()
    island = look_ahead_island(model, state, limits, lf_options, sc_options)
    problem = build(
        model,
        state,
        scs,
        OperatingState.PREPARE_FOR_ISLAND,
        weights,
        limits,
        options,
        prev_setpoints=prev_setpoints,
        counterpart=island,
    )
    solution = solve_qp(problem, options)
    island_problem = build(
        island.model,
        island.state,
        island.scs,
        OperatingState.ISLAND,
        weights,
        replace(limits, ramp=np.inf),
        options,
        counterpart=Linearisation(model, state, scs),
    )
    island_solution = solve_qp(island_problem, options)
    logger.debug(
        "prepare OPF pair: objective %.4e, island objective %.4e",
        solution.objective,
        island_solution.objective,
    )
    return PrepareSolution(problem, solution, island, island_problem, island_solution)
