#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Sensitivity coefficients

This module computes the linear sensitivity of the grid state to its control
variables. With F(x, u) = 0 the load flow equations, A = dF/dx and
b(u) = -dF/du, every column of dx/du solves A * dx/du = b(u). A is factored
once and reused for all controls.

From the rectangular derivatives it derives voltage magnitude, branch current
magnitude, nodal injection and network loss sensitivities.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .converter import LossDerivative
from .errors import ControlVariableError, SingularSystemError
from .loadflow import (
    GridState,
    LoadFlowOptions,
    Quantity,
    SetpointSet,
    branch_current_magnitudes,
    equations_for,
    ic_powers,
    network_losses,
    solve,
)
from .network import BusKind, BusRole, NetworkModel

logger = logging.getLogger(__name__)

MAGNITUDE_FLOOR = 1e-9
CURRENT_FLOOR = 1e-6

CONTROL_QUANTITIES: Dict[BusRole, Tuple[Quantity, ...]] = {
    BusRole.AC_SLACK: (),
    BusRole.AC_PQ: (Quantity.P, Quantity.Q),
    BusRole.AC_PV: (Quantity.P, Quantity.VMAG),
    BusRole.IC_AC_POWER: (Quantity.P, Quantity.Q),
    BusRole.IC_AC_VOLTAGE: (Quantity.Q,),
    BusRole.IC_AC_FORMING: (Quantity.VMAG, Quantity.VANGLE),
    BusRole.IC_DC_POWER: (),
    BusRole.IC_DC_VOLTAGE: (Quantity.VDC,),
    BusRole.IC_DC_FORMING: (),
    BusRole.DC_P: (Quantity.P,),
    BusRole.DC_V: (Quantity.VDC,),
}


@dataclass(frozen=True)
class ControlVariable:
    """A controllable quantity at a bus."""

    kind: Quantity
    bus: int

    @property
    def label(self) -> str:
        return f"{self.kind.value}[{self.bus}]"


@dataclass(frozen=True)
class SensitivityOptions:
    loss_derivative: LossDerivative = LossDerivative.FULL
    max_condition: float = 1e14


@dataclass
class SensitivityMatrices:
    """
    Sensitivity coefficients, one column per control variable.

    Attributes:
        controls: Column order
        du_dx: Rectangular state derivatives, rows ordered like the state vector
        dE_dx: |E| of every bus (AC then DC)
        dI_dx: Sending-end |I| of every branch
        dP_dx: Active injection of every bus (AC then DC)
        dQ_dx: Reactive injection of every AC bus
        dPloss_dx: Total active losses (AC lines, DC lines, ICs)
        dQloss_dx: AC reactive losses
        dPloss_ac_dx: AC line losses
        dPloss_dc_dx: DC line losses
        dPloss_ic_dx: Loss of every IC, in link order
    """

    controls: Tuple[ControlVariable, ...]
    du_dx: np.ndarray
    dE_dx: np.ndarray
    dI_dx: np.ndarray
    dP_dx: np.ndarray
    dQ_dx: np.ndarray
    dPloss_dx: np.ndarray
    dQloss_dx: np.ndarray
    dPloss_ac_dx: np.ndarray
    dPloss_dc_dx: np.ndarray
    dPloss_ic_dx: np.ndarray

    def column(self, control: ControlVariable) -> int:
        try:
            return self.controls.index(control)
        except ValueError:
            raise ControlVariableError(f"no sensitivity column for {control.label}") from None


def control_variables(model: NetworkModel) -> List[ControlVariable]:
    """All admissible control variables for the current roles, in bus order."""
    return [
        ControlVariable(kind, bus.id)
        for bus in model.buses
        for kind in CONTROL_QUANTITIES[bus.role]
    ]


def check_control(model: NetworkModel, control: ControlVariable) -> None:
    """
    Raises:
        ControlVariableError: if the quantity is not a control of the bus role
    """
    if not 0 <= control.bus < len(model.buses):
        raise ControlVariableError(f"unknown bus {control.bus}")
    role = model.buses[control.bus].role
    if control.kind not in CONTROL_QUANTITIES[role]:
        raise ControlVariableError(f"{control.kind.value} is not a control of a {role.value} bus")


def build_system_matrix(
    model: NetworkModel, state: GridState, options: Optional[SensitivityOptions] = None
) -> np.ndarray:
    """The load flow Jacobian at state."""
    options = options or SensitivityOptions()
    return equations_for(model).jacobian(state, options.loss_derivative)


def rhs(model: NetworkModel, state: GridState, control: ControlVariable) -> np.ndarray:
    """
    Right-hand side -dF/du for one control variable.

    Raises:
        ControlVariableError: if the control is not admissible
    """
    check_control(model, control)
    n = model.n_ac
    size = 2 * n + model.n_dc
    b = np.zeros(size)
    bus = control.bus
    role = model.buses[bus].role
    if model.buses[bus].kind is BusKind.DC:
        b[2 * n + model.dc_local(bus)] = 1.0
    elif control.kind is Quantity.P:
        b[bus] = 1.0
    elif control.kind is Quantity.Q:
        b[n + bus] = 1.0
    elif role is BusRole.AC_PV:
        b[n + bus] = 2.0 * abs(state.e_ac[bus])
    else:
        magnitude = abs(state.e_ac[bus])
        angle = float(np.angle(state.e_ac[bus]))
        if control.kind is Quantity.VMAG:
            b[bus], b[n + bus] = np.cos(angle), np.sin(angle)
        else:
            b[bus], b[n + bus] = -magnitude * np.sin(angle), magnitude * np.cos(angle)
    return b


class SensitivityModel:
    """
    Factored sensitivity system for one operating point.

    Args:
        model: Network model
        state: Converged load flow state
        controls: Control variables; all admissible ones when None
        options: Derivative settings

    Raises:
        SingularSystemError: if the system matrix is singular or too ill-conditioned
    """

    def __init__(
        self,
        model: NetworkModel,
        state: GridState,
        controls: Optional[Sequence[ControlVariable]] = None,
        options: Optional[SensitivityOptions] = None,
    ):
        self.model = model
        self.state = state
        self.options = options or SensitivityOptions()
        self.controls = tuple(controls if controls is not None else control_variables(model))
        for control in self.controls:
            check_control(model, control)
        self.equations = equations_for(model)

        system = build_system_matrix(model, state, self.options)
        condition = float(np.linalg.cond(system))
        if not np.isfinite(condition) or condition > self.options.max_condition:
            raise SingularSystemError(condition)
        self._lu = lu_factor(system)
        logger.debug("sensitivity system %dx%d, cond %.2e", *system.shape, condition)

    def voltage_sc(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            Tuple of (rectangular state derivatives, |E| derivatives of every bus)
        """
        n = self.model.n_ac
        if not self.controls:
            size = self.equations.size
            return np.zeros((size, 0)), np.zeros((len(self.model.buses), 0))
        b = np.column_stack([rhs(self.model, self.state, x) for x in self.controls])
        du = lu_solve(self._lu, b)

        e_re = self.state.e_ac.real[:, None]
        e_im = self.state.e_ac.imag[:, None]
        magnitude = np.abs(self.state.e_ac)[:, None]
        safe = np.where(magnitude < MAGNITUDE_FLOOR, 1.0, magnitude)
        d_ac = (e_re * du[:n] + e_im * du[n : 2 * n]) / safe
        d_ac[magnitude[:, 0] < MAGNITUDE_FLOOR] = 0.0
        e_dc = self.state.e_dc[:, None]
        d_dc = np.sign(e_dc) * du[2 * n :]
        return du, np.vstack([d_ac, d_dc])

    def current_sc(self, du: np.ndarray) -> np.ndarray:
        return current_sc(self.model, self.state, du)

    def injection_sc(self, du: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Active (all buses) and reactive (AC buses) injection derivatives."""
        dp, dq, dpdc = self.equations.injection_jacobian(self.state)
        return np.vstack([dp @ du, dpdc @ du]), dq @ du

    def loss_sc(self, du: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return loss_breakdown(self.model, self.state, du, self.options)

    def compute(self) -> SensitivityMatrices:
        du, de = self.voltage_sc()
        di = self.current_sc(du)
        dp, dq = self.injection_sc(du)
        p_ac, q_ac, p_dc, ic = self.loss_sc(du)
        return SensitivityMatrices(
            controls=self.controls,
            du_dx=du,
            dE_dx=de,
            dI_dx=di,
            dP_dx=dp,
            dQ_dx=dq,
            dPloss_dx=p_ac + p_dc + ic.sum(axis=0),
            dQloss_dx=q_ac,
            dPloss_ac_dx=p_ac,
            dPloss_dc_dx=p_dc,
            dPloss_ic_dx=ic,
        )


def voltage_sc(
    model: NetworkModel,
    state: GridState,
    controls: Optional[Sequence[ControlVariable]] = None,
    options: Optional[SensitivityOptions] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    return SensitivityModel(model, state, controls, options).voltage_sc()


def current_sc(model: NetworkModel, state: GridState, du: np.ndarray) -> np.ndarray:
    """
    Sending-end current magnitude derivatives of every branch.

    Args:
        model: Network model
        state: Operating point
        du: Rectangular state derivatives from voltage_sc
    """
    n = model.n_ac
    d_complex = np.vstack([du[:n] + 1j * du[n : 2 * n], du[2 * n :].astype(complex)])
    e_all = np.concatenate([state.e_ac, state.e_dc.astype(complex)])
    rows = []
    for br in model.branches:
        f, t = br.from_bus, br.to_bus
        y, y_f = br.series_admittance, br.shunt_from
        if model.branch_kind(br) is BusKind.DC:
            y, y_f = y.real, y_f.real
        current = y * (e_all[f] - e_all[t]) + y_f * e_all[f]
        d_current = y * (d_complex[f] - d_complex[t]) + y_f * d_complex[f]
        magnitude = abs(current)
        if magnitude < CURRENT_FLOOR:
            rows.append(np.zeros(du.shape[1]))
        else:
            rows.append(np.real(np.conj(current) * d_current) / magnitude)
    return np.array(rows).reshape(len(model.branches), du.shape[1])


def loss_breakdown(
    model: NetworkModel,
    state: GridState,
    du: np.ndarray,
    options: Optional[SensitivityOptions] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Loss derivatives split by origin.

    Returns:
        Tuple of (AC active, AC reactive, DC, per-IC) loss derivatives
    """
    options = options or SensitivityOptions()
    eq = equations_for(model)
    n = model.n_ac
    e_re, e_im = state.e_ac.real, state.e_ac.imag
    d_re, d_im, d_dc = du[:n], du[n : 2 * n], du[2 * n :]
    p_ac = 2.0 * (eq.g @ e_re) @ d_re + 2.0 * (eq.g @ e_im) @ d_im
    q_ac = -2.0 * (eq.b @ e_re) @ d_re - 2.0 * (eq.b @ e_im) @ d_im
    p_dc = 2.0 * (eq.ydc @ state.e_dc) @ d_dc
    ic = np.array(
        [eq.loss_gradient(state, link, options.loss_derivative) @ du for link in model.ic_links]
    ).reshape(len(model.ic_links), du.shape[1])
    return p_ac, q_ac, p_dc, ic


def loss_sc(
    model: NetworkModel,
    state: GridState,
    du: np.ndarray,
    options: Optional[SensitivityOptions] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Total active and reactive loss derivatives."""
    p_ac, q_ac, p_dc, ic = loss_breakdown(model, state, du, options)
    return p_ac + p_dc + ic.sum(axis=0), q_ac


def compute(
    model: NetworkModel,
    state: GridState,
    controls: Optional[Sequence[ControlVariable]] = None,
    options: Optional[SensitivityOptions] = None,
) -> SensitivityMatrices:
    """Factor the system once and evaluate every sensitivity block."""
    return SensitivityModel(model, state, controls, options).compute()


def total_losses(model: NetworkModel, state: GridState) -> Tuple[float, float]:
    """Total active losses (lines and ICs) and AC reactive losses, per unit."""
    p_ac, q_ac, p_dc = network_losses(model, state)
    p_ic = sum(power.p_loss for power in ic_powers(model, state).values())
    return p_ac + p_dc + p_ic, q_ac


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    """Largest entrywise |analytic - fd| / max(|fd|, floor)."""
    if np.size(analytic) == 0:
        return 0.0
    numeric = np.asarray(numeric)
    deviation = np.abs(np.asarray(analytic) - numeric)
    return float(np.max(deviation / np.maximum(np.abs(numeric), floor)))


def finite_difference_check(
    model: NetworkModel,
    state: GridState,
    step: float = 1e-5,
    options: Optional[SensitivityOptions] = None,
    floor: float = 1e-3,
) -> Dict[str, float]:
    """
    Compare analytic sensitivities with central finite differences of the load flow.

    The setpoints are taken from state, so state must be a load flow solution.
    Errors are relative per coefficient; entries below floor are compared
    against floor.

    Returns:
        Dict[str, float]: Max relative error per block ("voltage", "current", "loss")
    """
    options = options or SensitivityOptions()
    lf_options = LoadFlowOptions(tol=1e-12, loss_derivative=LossDerivative.FULL)
    setpoints = SetpointSet.from_state(model, state)
    state = solve(model, setpoints, state, lf_options).state
    sc = compute(model, state, options=options)

    def observe(sp: SetpointSet) -> Tuple[np.ndarray, np.ndarray, float]:
        solved = solve(model, sp, state, lf_options).state
        return (
            solved.magnitudes(),
            branch_current_magnitudes(model, solved),
            total_losses(model, solved)[0],
        )

    fd_e = np.zeros_like(sc.dE_dx)
    fd_i = np.zeros_like(sc.dI_dx)
    fd_loss = np.zeros_like(sc.dPloss_dx)
    for col, control in enumerate(sc.controls):
        base = setpoints.get(control.kind, control.bus)
        plus = observe(setpoints.with_value(control.kind, control.bus, base + step))
        minus = observe(setpoints.with_value(control.kind, control.bus, base - step))
        fd_e[:, col] = (plus[0] - minus[0]) / (2.0 * step)
        fd_i[:, col] = (plus[1] - minus[1]) / (2.0 * step)
        fd_loss[col] = (plus[2] - minus[2]) / (2.0 * step)

    return {
        "voltage": _relative_error(sc.dE_dx, fd_e, floor),
        "current": _relative_error(sc.dI_dx, fd_i, floor),
        "loss": _relative_error(sc.dPloss_dx, fd_loss, floor),
    }
