#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Hybrid AC/DC load flow

This module solves the steady state of a hybrid grid in rectangular
coordinates with a damped Newton-Raphson iteration on one dense Jacobian.

The unknown vector is [E' (AC buses), E'' (AC buses), E (DC buses)]. Each AC
bus owns two residual rows (indices a and n_ac + a) and each DC bus one row
(index 2 * n_ac + m). The rows a bus owns depend on its role:

    AC_SLACK, IC_AC_FORMING   E' and E'' pinned to the voltage phasor setpoint
    AC_PQ, IC_AC_POWER        P and Q mismatch
    AC_PV                     P mismatch and |E|^2 - |E*|^2
    IC_AC_VOLTAGE             IC active power balance and Q mismatch
    DC_P                      P mismatch
    DC_V, IC_DC_VOLTAGE       E - E*
    IC_DC_POWER               IC active power balance
    IC_DC_FORMING             E_l' - root of the forming closure quadratic

The IC power balance is P_l + P_k + P_loss = 0 with P_l and P_k the power
injected into the grid at the AC and DC terminals.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .converter import LossDerivative, ac_neighbours, loss_from_state, loss_gradient
from .errors import (
    ConvergenceError,
    DimensionMismatchError,
    InfeasibleFormingRootError,
    UnsupportedTopologyError,
)
from .network import BusKind, BusRole, IcLink, NetworkModel, build_admittance
from .utils.phasor import polar_to_complex

logger = logging.getLogger(__name__)


class Quantity(str, Enum):
    """A setpoint or control quantity at a bus."""

    P = "p"
    Q = "q"
    VMAG = "vmag"
    VANGLE = "vangle"
    VDC = "vdc"


# role -> (required quantities, quantities defaulting to zero)
ROLE_QUANTITIES: Dict[BusRole, Tuple[Tuple[Quantity, ...], Tuple[Quantity, ...]]] = {
    BusRole.AC_SLACK: ((Quantity.VMAG, Quantity.VANGLE), ()),
    BusRole.AC_PQ: ((), (Quantity.P, Quantity.Q)),
    BusRole.AC_PV: ((Quantity.VMAG,), (Quantity.P,)),
    BusRole.IC_AC_POWER: ((), (Quantity.P, Quantity.Q)),
    BusRole.IC_AC_VOLTAGE: ((), (Quantity.Q,)),
    BusRole.IC_AC_FORMING: ((Quantity.VMAG, Quantity.VANGLE), ()),
    BusRole.IC_DC_POWER: ((), ()),
    BusRole.IC_DC_VOLTAGE: ((Quantity.VDC,), ()),
    BusRole.IC_DC_FORMING: ((), ()),
    BusRole.DC_P: ((), (Quantity.P,)),
    BusRole.DC_V: ((Quantity.VDC,), ()),
}


@dataclass(eq=False)
class GridState:
    """
    Rectangular voltages of a hybrid grid, per unit.

    Attributes:
        e_ac: Complex AC bus voltages E' + jE'' in AC id order
        e_dc: DC bus voltages in DC id order
    """

    e_ac: np.ndarray
    e_dc: np.ndarray

    def __post_init__(self) -> None:
        self.e_ac = np.asarray(self.e_ac, dtype=complex)
        self.e_dc = np.asarray(self.e_dc, dtype=float)

    @property
    def n_ac(self) -> int:
        return len(self.e_ac)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.e_ac.real, self.e_ac.imag, self.e_dc])

    @classmethod
    def from_vector(cls, x: np.ndarray, n_ac: int) -> "GridState":
        return cls(x[:n_ac] + 1j * x[n_ac : 2 * n_ac], x[2 * n_ac :].copy())

    def copy(self) -> "GridState":
        return GridState(self.e_ac.copy(), self.e_dc.copy())

    def magnitudes(self) -> np.ndarray:
        """|E| of every bus in id order (AC then DC)."""
        return np.concatenate([np.abs(self.e_ac), np.abs(self.e_dc)])

    def rotated(self, angle_rad: float) -> "GridState":
        """AC phasors rotated by angle_rad."""
        return GridState(self.e_ac * np.exp(1j * angle_rad), self.e_dc.copy())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ac": [[float(v.real), float(v.imag)] for v in self.e_ac],
            "dc": [float(v) for v in self.e_dc],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GridState":
        ac = np.array([complex(re, im) for re, im in data["ac"]], dtype=complex)
        return cls(ac, np.array(data["dc"], dtype=float))


@dataclass
class SetpointSet:
    """
    Controlled quantities per bus, per unit, keyed by bus id.

    Angles are in radians. Active and reactive values are injections.
    """

    p: Dict[int, float] = field(default_factory=dict)
    q: Dict[int, float] = field(default_factory=dict)
    vmag: Dict[int, float] = field(default_factory=dict)
    vangle: Dict[int, float] = field(default_factory=dict)
    vdc: Dict[int, float] = field(default_factory=dict)

    def table(self, quantity: Quantity) -> Dict[int, float]:
        return getattr(self, quantity.value)

    def get(self, quantity: Quantity, bus: int, default: float = 0.0) -> float:
        return self.table(quantity).get(bus, default)

    def copy(self) -> "SetpointSet":
        return SetpointSet(
            dict(self.p), dict(self.q), dict(self.vmag), dict(self.vangle), dict(self.vdc)
        )

    def with_value(self, quantity: Quantity, bus: int, value: float) -> "SetpointSet":
        result = self.copy()
        result.table(quantity)[bus] = value
        return result

    def without_bus(self, bus: int) -> "SetpointSet":
        result = self.copy()
        for quantity in Quantity:
            result.table(quantity).pop(bus, None)
        return result

    def violations(self, model: NetworkModel) -> List[str]:
        """Quantities missing or not admitted by the bus roles."""
        found: List[str] = []
        n = len(model.buses)
        for quantity in Quantity:
            for bus in self.table(quantity):
                if not 0 <= bus < n:
                    found.append(f"{quantity.value} setpoint for unknown bus {bus}")
                    continue
                required, optional = ROLE_QUANTITIES[model.buses[bus].role]
                if quantity not in required and quantity not in optional:
                    found.append(
                        f"{quantity.value} setpoint not admitted at bus {bus} "
                        f"({model.buses[bus].role.value})"
                    )
        for b in model.buses:
            for quantity in ROLE_QUANTITIES[b.role][0]:
                if b.id not in self.table(quantity):
                    found.append(f"missing {quantity.value} setpoint at bus {b.id}")
        return found

    @classmethod
    def from_state(cls, model: NetworkModel, state: GridState) -> "SetpointSet":
        """Setpoints reproducing state under the model's roles."""
        s_ac, p_dc = nodal_injections(model, state)
        n_ac = model.n_ac
        result = cls()
        for b in model.buses:
            required, optional = ROLE_QUANTITIES[b.role]
            for quantity in required + optional:
                if quantity is Quantity.P:
                    value = s_ac[b.id].real if b.kind is BusKind.AC else p_dc[b.id - n_ac]
                elif quantity is Quantity.Q:
                    value = s_ac[b.id].imag
                elif quantity is Quantity.VMAG:
                    value = abs(state.e_ac[b.id])
                elif quantity is Quantity.VANGLE:
                    value = float(np.angle(state.e_ac[b.id]))
                else:
                    value = state.e_dc[b.id - n_ac]
                result.table(quantity)[b.id] = float(value)
        return result

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {q.value: {str(k): v for k, v in self.table(q).items()} for q in Quantity}

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, float]]) -> "SetpointSet":
        result = cls()
        for quantity in Quantity:
            for bus, value in data.get(quantity.value, {}).items():
                result.table(quantity)[int(bus)] = float(value)
        return result


@dataclass(frozen=True)
class LoadFlowOptions:
    """
    Newton-Raphson settings.

    Attributes:
        tol: Infinity-norm residual tolerance (p.u.)
        max_iter: Maximum Newton iterations
        max_halvings: Maximum step halvings per iteration
        loss_derivative: How IC loss partials enter the Jacobian
    """

    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 6
    loss_derivative: LossDerivative = LossDerivative.FULL


@dataclass
class LoadFlowResult:
    state: GridState
    iterations: int
    residual_norm: float
    trace: List[float]


@dataclass(frozen=True)
class IcBalance:
    """Power balance of one IC; all values per unit."""

    name: str
    p_ac: float
    p_loss: float
    p_dc_drawn: float

    @property
    def mismatch(self) -> float:
        return abs(self.p_ac + self.p_loss - self.p_dc_drawn)


@dataclass(frozen=True)
class QuadraticCoefficients:
    """a x^2 + b x + c = 0 solved for the real part of a forming IC voltage."""

    a: float
    b: float
    c: float
    link: str = ""


def forming_voltage_root(q: QuadraticCoefficients) -> float:
    """
    Larger root of the forming closure quadratic.

    Falls back to the linear root when a vanishes.

    Raises:
        InfeasibleFormingRootError: if the discriminant is negative
    """
    if abs(q.a) < 1e-12:
        if q.b == 0.0:
            raise InfeasibleFormingRootError(q.link, float("nan"))
        return -q.c / q.b
    disc = q.b * q.b - 4.0 * q.a * q.c
    if disc < 0.0:
        raise InfeasibleFormingRootError(q.link, disc)
    return (-q.b + math.sqrt(disc)) / (2.0 * q.a)


@dataclass(frozen=True)
class _FormingTerminal:
    link: IcLink
    l: int
    i: int
    k: int
    j: int


class HybridEquations:
    """
    Residual and Jacobian of the hybrid load flow for one role assignment.

    Args:
        model: Network model; roles decide which rows each bus owns
    """

    def __init__(self, model: NetworkModel):
        self.model = model
        self.yac, self.ydc = build_admittance(model)
        self.g = self.yac.real
        self.b = self.yac.imag
        self.n_ac = model.n_ac
        self.n_dc = model.n_dc
        self.size = 2 * self.n_ac + self.n_dc

        roles = [bus.role for bus in model.buses]
        if BusRole.AC_SLACK not in roles and BusRole.DC_V not in roles:
            raise UnsupportedTopologyError("no active-power slack")
        ic_roles = {link.ac_bus for link in model.ic_links} | {l.dc_bus for l in model.ic_links}
        for bus in model.buses:
            if bus.role.is_ic and bus.id not in ic_roles:
                raise UnsupportedTopologyError(f"bus {bus.label} has an IC role without a link")

        self.forming: List[_FormingTerminal] = []
        for link in model.ic_links:
            if model.buses[link.dc_bus].role is BusRole.IC_DC_FORMING:
                ac_nb = ac_neighbours(self.yac, link.ac_bus)
                dc_nb = ac_neighbours(self.ydc, model.dc_local(link.dc_bus))
                if len(ac_nb) != 1 or len(dc_nb) != 1:
                    raise UnsupportedTopologyError(
                        f"unsupported multi-neighbor forming bus at IC {link.name}"
                    )
                self.forming.append(
                    _FormingTerminal(
                        link, link.ac_bus, int(ac_nb[0]), model.dc_local(link.dc_bus), int(dc_nb[0])
                    )
                )

    # Injections

    def injections(self, state: GridState) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (P_ac, Q_ac, P_dc, I_ac complex)."""
        current = self.yac @ state.e_ac
        s = state.e_ac * np.conj(current)
        p_dc = state.e_dc * (self.ydc @ state.e_dc)
        return s.real, s.imag, p_dc, current

    def injection_jacobian(self, state: GridState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Derivatives of nodal injections with respect to the state vector.

        Returns:
            Tuple of (dP_ac, dQ_ac, dP_dc) with shapes (n_ac, N), (n_ac, N), (n_dc, N)
        """
        n, m = self.n_ac, self.n_dc
        e_re, e_im = state.e_ac.real, state.e_ac.imag
        current = self.yac @ state.e_ac
        i_re, i_im = current.real, current.imag
        g, b = self.g, self.b

        dp = np.zeros((n, self.size))
        dq = np.zeros((n, self.size))
        dp[:, :n] = e_re[:, None] * g + e_im[:, None] * b + np.diag(i_re)
        dp[:, n : 2 * n] = -e_re[:, None] * b + e_im[:, None] * g + np.diag(i_im)
        dq[:, :n] = e_im[:, None] * g - e_re[:, None] * b - np.diag(i_im)
        dq[:, n : 2 * n] = -e_im[:, None] * b - e_re[:, None] * g + np.diag(i_re)

        dpdc = np.zeros((m, self.size))
        dpdc[:, 2 * n :] = state.e_dc[:, None] * self.ydc + np.diag(self.ydc @ state.e_dc)
        return dp, dq, dpdc

    def loss_gradient(self, state: GridState, link: IcLink, mode: LossDerivative) -> np.ndarray:
        g_re, g_im, g_dc = loss_gradient(state, link, self.yac, self.ydc, link.loss_params, mode)
        return np.concatenate([g_re, g_im, g_dc])

    # Forming closure

    def closure_coefficients(
        self, state: GridState, term: _FormingTerminal, p_dc_k: float, p_loss: float
    ) -> QuadraticCoefficients:
        l, i = term.l, term.i
        e_l, e_i = state.e_ac[l], state.e_ac[i]
        g_ll, g_li, b_li = self.g[l, l], self.g[l, i], self.b[l, i]
        a = g_ll
        b = g_li * e_i.real - b_li * e_i.imag
        c = (
            g_ll * e_l.imag**2
            + g_li * e_i.imag * e_l.imag
            + b_li * e_i.real * e_l.imag
            + p_dc_k
            + p_loss
        )
        return QuadraticCoefficients(a, b, c, term.link.name)

    def closure_root(self, state: GridState, term: _FormingTerminal, p_dc_k: float) -> float:
        """Root of the forming closure quadratic giving E_l'."""
        p_loss = loss_from_state(state, term.link, self.yac)
        return forming_voltage_root(self.closure_coefficients(state, term, p_dc_k, p_loss))

    # Residual and Jacobian

    def residual(self, state: GridState, sp: SetpointSet) -> np.ndarray:
        n = self.n_ac
        p, q, p_dc, _ = self.injections(state)
        f = np.zeros(self.size)
        for bus in self.model.buses:
            role, a = bus.role, bus.id
            if bus.kind is BusKind.AC:
                e = state.e_ac[a]
                if role in (BusRole.AC_SLACK, BusRole.IC_AC_FORMING):
                    target = polar_to_complex(sp.vmag[a], sp.vangle[a])
                    f[a] = e.real - target.real
                    f[n + a] = e.imag - target.imag
                elif role in (BusRole.AC_PQ, BusRole.IC_AC_POWER):
                    f[a] = p[a] - sp.get(Quantity.P, a)
                    f[n + a] = q[a] - sp.get(Quantity.Q, a)
                elif role is BusRole.AC_PV:
                    f[a] = p[a] - sp.get(Quantity.P, a)
                    f[n + a] = abs(e) ** 2 - sp.vmag[a] ** 2
                elif role is BusRole.IC_AC_VOLTAGE:
                    f[a] = self._balance(state, a, p, p_dc)
                    f[n + a] = q[a] - sp.get(Quantity.Q, a)
            else:
                m = a - n
                row = 2 * n + m
                if role is BusRole.DC_P:
                    f[row] = p_dc[m] - sp.get(Quantity.P, a)
                elif role in (BusRole.DC_V, BusRole.IC_DC_VOLTAGE):
                    f[row] = state.e_dc[m] - sp.vdc[a]
                elif role is BusRole.IC_DC_POWER:
                    f[row] = self._balance(state, a, p, p_dc)
        for term in self.forming:
            root = self.closure_root(state, term, p_dc[term.k])
            f[2 * n + term.k] = state.e_ac[term.l].real - root
        return f

    def _balance(self, state: GridState, bus: int, p: np.ndarray, p_dc: np.ndarray) -> float:
        link = self.model.link_at(bus)
        p_loss = loss_from_state(state, link, self.yac)
        return p[link.ac_bus] + p_dc[self.model.dc_local(link.dc_bus)] + p_loss

    def jacobian(self, state: GridState, mode: LossDerivative = LossDerivative.FULL) -> np.ndarray:
        n = self.n_ac
        dp, dq, dpdc = self.injection_jacobian(state)
        jac = np.zeros((self.size, self.size))
        for bus in self.model.buses:
            role, a = bus.role, bus.id
            if bus.kind is BusKind.AC:
                if role in (BusRole.AC_SLACK, BusRole.IC_AC_FORMING):
                    jac[a, a] = 1.0
                    jac[n + a, n + a] = 1.0
                elif role in (BusRole.AC_PQ, BusRole.IC_AC_POWER):
                    jac[a] = dp[a]
                    jac[n + a] = dq[a]
                elif role is BusRole.AC_PV:
                    jac[a] = dp[a]
                    jac[n + a, a] = 2.0 * state.e_ac[a].real
                    jac[n + a, n + a] = 2.0 * state.e_ac[a].imag
                elif role is BusRole.IC_AC_VOLTAGE:
                    jac[a] = self._balance_row(state, a, dp, dpdc, mode)
                    jac[n + a] = dq[a]
            else:
                m = a - n
                row = 2 * n + m
                if role is BusRole.DC_P:
                    jac[row] = dpdc[m]
                elif role in (BusRole.DC_V, BusRole.IC_DC_VOLTAGE):
                    jac[row, row] = 1.0
                elif role is BusRole.IC_DC_POWER:
                    jac[row] = self._balance_row(state, a, dp, dpdc, mode)
        for term in self.forming:
            jac[2 * n + term.k] = self._closure_row(state, term, dpdc, mode)
        return jac

    def _balance_row(
        self, state: GridState, bus: int, dp: np.ndarray, dpdc: np.ndarray, mode: LossDerivative
    ) -> np.ndarray:
        link = self.model.link_at(bus)
        return (
            dp[link.ac_bus]
            + dpdc[self.model.dc_local(link.dc_bus)]
            + self.loss_gradient(state, link, mode)
        )

    def _closure_row(
        self, state: GridState, term: _FormingTerminal, dpdc: np.ndarray, mode: LossDerivative
    ) -> np.ndarray:
        n = self.n_ac
        l, i, k = term.l, term.i, term.k
        e_l, e_i = state.e_ac[l], state.e_ac[i]
        g_ll, g_li, b_li = self.g[l, l], self.g[l, i], self.b[l, i]
        p_dc_k = float(state.e_dc[k] * (self.ydc[k] @ state.e_dc))
        p_loss = loss_from_state(state, term.link, self.yac)
        q = self.closure_coefficients(state, term, p_dc_k, p_loss)
        a, b, c = q.a, q.b, q.c

        db = np.zeros(self.size)
        db[i] = g_li
        db[n + i] = -b_li

        loss_grad = self.loss_gradient(state, term.link, mode)
        if mode is LossDerivative.SPLIT:
            loss_grad[l] = 0.0
        dc = dpdc[k] + loss_grad
        dc[i] += b_li * e_l.imag
        dc[n + i] += g_li * e_l.imag
        dc[n + l] += 2.0 * g_ll * e_l.imag + g_li * e_i.imag + b_li * e_i.real

        if abs(a) < 1e-12:
            d_root = (c / b**2) * db - dc / b
        else:
            disc = b * b - 4.0 * a * c
            if disc <= 0.0:
                raise InfeasibleFormingRootError(term.link.name, disc)
            sq = math.sqrt(disc)
            d_root = ((-1.0 + b / sq) / (2.0 * a)) * db - dc / sq
        row = -d_root
        row[l] += 1.0
        return row


@lru_cache(maxsize=32)
def equations_for(model: NetworkModel) -> HybridEquations:
    return HybridEquations(model)


def flat_start(model: NetworkModel, setpoints: SetpointSet) -> GridState:
    """Initial state: 1 p.u. AC, setpoint phasors where pinned, DC at the DC reference."""
    e_ac = np.ones(model.n_ac, dtype=complex)
    dc_refs = [setpoints.vdc[b.id] for b in model.dc_buses if b.id in setpoints.vdc]
    e_dc = np.full(model.n_dc, dc_refs[0] if dc_refs else 1.0)
    for bus in model.buses:
        if bus.role in (BusRole.AC_SLACK, BusRole.IC_AC_FORMING):
            e_ac[bus.id] = polar_to_complex(setpoints.vmag[bus.id], setpoints.vangle[bus.id])
        elif bus.role is BusRole.AC_PV:
            e_ac[bus.id] = setpoints.vmag[bus.id]
        elif bus.role in (BusRole.DC_V, BusRole.IC_DC_VOLTAGE):
            e_dc[model.dc_local(bus.id)] = setpoints.vdc[bus.id]
    return GridState(e_ac, e_dc)


def _check_dimensions(model: NetworkModel, setpoints: SetpointSet, state: Optional[GridState]):
    problems = setpoints.violations(model)
    if problems:
        raise DimensionMismatchError("; ".join(problems))
    if state is not None and (len(state.e_ac) != model.n_ac or len(state.e_dc) != model.n_dc):
        raise DimensionMismatchError(
            f"state has {len(state.e_ac)}+{len(state.e_dc)} buses, model {model.n_ac}+{model.n_dc}"
        )


def assemble_residuals(model: NetworkModel, setpoints: SetpointSet, state: GridState) -> np.ndarray:
    """Mismatch vector F(x) in row order [AC first rows, AC second rows, DC rows]."""
    _check_dimensions(model, setpoints, state)
    return equations_for(model).residual(state, setpoints)


def jacobian(
    model: NetworkModel,
    setpoints: SetpointSet,
    state: GridState,
    mode: LossDerivative = LossDerivative.FULL,
) -> np.ndarray:
    """
    dF/dx at state.

    The setpoints are checked against the model like in assemble_residuals; their
    values do not enter the derivative.

    Raises:
        DimensionMismatchError: if setpoints or state do not fit the model
    """
    _check_dimensions(model, setpoints, state)
    return equations_for(model).jacobian(state, mode)


def numerical_jacobian(
    model: NetworkModel, setpoints: SetpointSet, state: GridState, step: float = 1e-6
) -> np.ndarray:
    """Central finite-difference Jacobian of the residual."""
    eq = equations_for(model)
    x0 = state.to_vector()
    jac = np.zeros((eq.size, eq.size))
    for col in range(eq.size):
        x_plus, x_minus = x0.copy(), x0.copy()
        x_plus[col] += step
        x_minus[col] -= step
        f_plus = eq.residual(GridState.from_vector(x_plus, eq.n_ac), setpoints)
        f_minus = eq.residual(GridState.from_vector(x_minus, eq.n_ac), setpoints)
        jac[:, col] = (f_plus - f_minus) / (2.0 * step)
    return jac


def _factor(jac: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            lu, piv = lu_factor(jac, check_finite=True)
        except (LinAlgWarning, ValueError, np.linalg.LinAlgError) as e:
            raise np.linalg.LinAlgError(str(e)) from e
    if np.any(np.diag(lu) == 0.0):
        raise np.linalg.LinAlgError("singular matrix")
    return lu, piv


def solve(
    model: NetworkModel,
    setpoints: SetpointSet,
    initial: Optional[GridState] = None,
    options: Optional[LoadFlowOptions] = None,
) -> LoadFlowResult:
    """
    Solve the hybrid load flow.

    Args:
        model: Network model with roles
        setpoints: Controlled quantities for the roles
        initial: Warm start; flat start when None
        options: Newton settings

    Returns:
        LoadFlowResult: Converged state with iteration count and residual trace

    Raises:
        ConvergenceError: if the tolerance is not reached within max_iter
        DimensionMismatchError: if setpoints or initial do not fit the model
        UnsupportedTopologyError: if there is no slack or a forming IC has several neighbours
    """
    options = options or LoadFlowOptions()
    _check_dimensions(model, setpoints, initial)
    eq = equations_for(model)
    state = initial.copy() if initial is not None else flat_start(model, setpoints)
    x = state.to_vector()
    f = eq.residual(state, setpoints)
    norm = float(np.max(np.abs(f)))
    trace = [norm]

    for iteration in range(options.max_iter + 1):
        if norm < options.tol:
            logger.debug("load flow converged in %d iterations (%.2e)", iteration, norm)
            return LoadFlowResult(GridState.from_vector(x, eq.n_ac), iteration, norm, trace)
        if iteration == options.max_iter:
            break
        try:
            lu = _factor(eq.jacobian(GridState.from_vector(x, eq.n_ac), options.loss_derivative))
        except (np.linalg.LinAlgError, InfeasibleFormingRootError) as e:
            raise ConvergenceError(f"singular load flow Jacobian: {e}", trace) from e
        dx = lu_solve(lu, -f)
        if not np.all(np.isfinite(dx)):
            raise ConvergenceError("non-finite Newton step", trace)

        step = 1.0
        accepted = None
        for _ in range(options.max_halvings + 1):
            x_try = x + step * dx
            try:
                f_try = eq.residual(GridState.from_vector(x_try, eq.n_ac), setpoints)
            except InfeasibleFormingRootError:
                step *= 0.5
                continue
            norm_try = float(np.max(np.abs(f_try)))
            accepted = (x_try, f_try, norm_try)
            if norm_try < norm:
                break
            step *= 0.5
        if accepted is None:
            raise ConvergenceError("no feasible step along the Newton direction", trace)
        x, f, norm = accepted
        trace.append(norm)

    raise ConvergenceError(
        f"load flow did not converge in {options.max_iter} iterations (residual {norm:.3e})", trace
    )


def nodal_injections(model: NetworkModel, state: GridState) -> Tuple[np.ndarray, np.ndarray]:
    """Complex AC injections and DC injections, per unit."""
    yac, ydc = build_admittance(model)
    s_ac = state.e_ac * np.conj(yac @ state.e_ac)
    p_dc = state.e_dc * (ydc @ state.e_dc)
    return s_ac, p_dc


@dataclass(frozen=True)
class BranchFlow:
    """Per-unit currents and powers at both ends of a branch."""

    label: str
    i_from: complex
    i_to: complex
    s_from: complex
    s_to: complex

    @property
    def loss(self) -> complex:
        return self.s_from + self.s_to


def _end_voltages(model: NetworkModel, state: GridState, bus: int) -> complex:
    if bus < model.n_ac:
        return complex(state.e_ac[bus])
    return complex(state.e_dc[bus - model.n_ac])


def branch_flows(model: NetworkModel, state: GridState) -> List[BranchFlow]:
    flows = []
    for br in model.branches:
        e_f = _end_voltages(model, state, br.from_bus)
        e_t = _end_voltages(model, state, br.to_bus)
        y = br.series_admittance
        y_f, y_t = br.shunt_from, br.shunt_to
        if model.branch_kind(br) is BusKind.DC:
            y, y_f, y_t = y.real, y_f.real, y_t.real
        i_f = y * (e_f - e_t) + y_f * e_f
        i_t = y * (e_t - e_f) + y_t * e_t
        flows.append(
            BranchFlow(br.label, i_f, i_t, e_f * np.conj(i_f), e_t * np.conj(i_t))
        )
    return flows


def branch_current_magnitudes(model: NetworkModel, state: GridState) -> np.ndarray:
    """|I| at the sending end of every branch, per unit."""
    return np.array([abs(flow.i_from) for flow in branch_flows(model, state)])


def network_losses(model: NetworkModel, state: GridState) -> Tuple[float, float, float]:
    """AC active, AC reactive and DC network losses (per unit), IC losses excluded."""
    s_ac, p_dc = nodal_injections(model, state)
    return float(s_ac.real.sum()), float(s_ac.imag.sum()), float(p_dc.sum())


@dataclass(frozen=True)
class IcPower:
    name: str
    p_ac: float
    q_ac: float
    p_dc: float
    p_loss: float


def ic_powers(model: NetworkModel, state: GridState) -> Dict[str, IcPower]:
    """Injected powers at both IC terminals and the IC loss, per unit."""
    yac, _ = build_admittance(model)
    s_ac, p_dc = nodal_injections(model, state)
    result = {}
    for link in model.ic_links:
        result[link.name] = IcPower(
            name=link.name,
            p_ac=float(s_ac[link.ac_bus].real),
            q_ac=float(s_ac[link.ac_bus].imag),
            p_dc=float(p_dc[model.dc_local(link.dc_bus)]),
            p_loss=loss_from_state(state, link, yac),
        )
    return result


def check_balance(model: NetworkModel, state: GridState) -> List[IcBalance]:
    """
    IC power balance at state.

    For every IC, P_l + P_loss should equal the DC power drawn at its DC terminal.
    """
    return [
        IcBalance(name, power.p_ac, power.p_loss, -power.p_dc)
        for name, power in ic_powers(model, state).items()
    ]
