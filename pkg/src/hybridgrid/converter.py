#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Interfacing converter loss model

This module evaluates the power loss of an AC/DC interfacing converter (IC)
and its partial derivatives with respect to the rectangular grid state.

The loss is

    P_loss = (2*sqrt(2)/pi) * V0 * |I| + R0 * |I|^2
             + f_sw * (E_k / E_nom) * (u + v * |I| + w * |I|^2)

with |I| the magnitude of the AC-side current and E_k the DC voltage at the
converter DC terminal. All quantities are per unit.

Two derivative modes are offered. SPLIT keeps the conduction terms with the
1/(2|I|) prefactor and takes the switching terms as the gradient of
v*I_dc + w*I_dc^2 where I_dc is the DC terminal current. FULL differentiates
loss_power exactly through |I| and E_k.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Mapping, Tuple

import numpy as np

from .errors import ConverterError, ParameterError

if TYPE_CHECKING:
    from .loadflow import GridState
    from .network import IcLink

logger = logging.getLogger(__name__)

CONDUCTION_FACTOR = 2.0 * math.sqrt(2.0) / math.pi

# |I| below which d|I| is taken as zero
CURRENT_CLAMP = 1e-6


class LossDerivative(str, Enum):
    """How loss partial derivatives are formed."""

    SPLIT = "split"
    FULL = "full"


@dataclass(frozen=True)
class LossParams:
    """
    Converter loss coefficients, per unit.

    Attributes:
        v0: Conduction voltage drop
        r0: Conduction resistance
        u: Switching loss constant term
        v: Switching loss linear term
        w: Switching loss quadratic term
        e_nom: Nominal DC voltage
        f_sw: Switching frequency scaling (1.0 at the rated frequency)
    """

    v0: float
    r0: float
    u: float
    v: float
    w: float
    e_nom: float
    f_sw: float = 1.0

    def __post_init__(self) -> None:
        for name in ("v0", "r0", "u", "v", "w", "f_sw"):
            if getattr(self, name) < 0.0:
                raise ParameterError(f"loss parameter {name} must be non-negative")
        if self.e_nom <= 0.0:
            raise ParameterError("loss parameter e_nom must be positive")

    @classmethod
    def lossless(cls, e_nom: float = 1.0) -> "LossParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, e_nom)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LossParams":
        return cls(
            v0=float(data["v0"]),
            r0=float(data["r0"]),
            u=float(data["u"]),
            v=float(data["v"]),
            w=float(data["w"]),
            e_nom=float(data["e_nom"]),
            f_sw=float(data.get("f_sw", 1.0)),
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "v0": self.v0,
            "r0": self.r0,
            "u": self.u,
            "v": self.v,
            "w": self.w,
            "e_nom": self.e_nom,
            "f_sw": self.f_sw,
        }


@dataclass(frozen=True)
class AlphaBeta:
    """Real and imaginary parts of the IC AC-side current."""

    alpha: float
    beta: float

    @property
    def magnitude(self) -> float:
        return math.hypot(self.alpha, self.beta)


@dataclass(frozen=True)
class LossPartials:
    """
    Loss partial derivatives for an IC with one AC neighbour i and one DC neighbour j.

    The IC occupies AC bus l and DC bus k.
    """

    d_ei_re: float
    d_ei_im: float
    d_el_re: float
    d_el_im: float
    d_ek: float
    d_ej: float


def loss_power(i_ac_mag: float, e_k: float, p: LossParams) -> float:
    """
    Converter loss for a given AC current magnitude and DC terminal voltage.

    Args:
        i_ac_mag: AC current magnitude |I| (p.u.)
        e_k: DC voltage at the converter terminal (p.u.)
        p: Loss coefficients

    Returns:
        float: P_loss (p.u.), never negative

    Raises:
        ConverterError: if i_ac_mag is negative
    """
    if i_ac_mag < 0.0:
        raise ConverterError(f"current magnitude must be non-negative, got {i_ac_mag}")
    switching = p.f_sw * (e_k / p.e_nom) * (p.u + p.v * i_ac_mag + p.w * i_ac_mag**2)
    return CONDUCTION_FACTOR * p.v0 * i_ac_mag + p.r0 * i_ac_mag**2 + switching


def _ac_index(link: "IcLink") -> int:
    return link.ac_bus


def _dc_index(state: "GridState", link: "IcLink") -> int:
    return link.dc_bus - len(state.e_ac)


def ac_neighbours(yac: np.ndarray, bus: int) -> np.ndarray:
    row = yac[bus]
    mask = row != 0
    mask[bus] = False
    return np.flatnonzero(mask)


def alpha_beta(state: "GridState", link: "IcLink", yac: np.ndarray) -> AlphaBeta:
    """
    Rectangular components of the IC AC current for a single-neighbour IC bus.

    Raises:
        ConverterError: if the IC AC bus has more than one AC neighbour
    """
    l = _ac_index(link)
    neighbours = ac_neighbours(yac, l)
    if len(neighbours) > 1:
        raise ConverterError(
            f"IC {link.name} AC bus {l} has {len(neighbours)} AC neighbours; alpha/beta needs one"
        )
    current = yac[l, l] * state.e_ac[l]
    if len(neighbours) == 1:
        i = neighbours[0]
        current += yac[l, i] * state.e_ac[i]
    return AlphaBeta(float(current.real), float(current.imag))


def ic_current(state: "GridState", link: "IcLink", yac: np.ndarray) -> complex:
    """AC-side current injected by the IC, from the full admittance row."""
    return complex(yac[link.ac_bus] @ state.e_ac)


def loss_from_state(state: "GridState", link: "IcLink", yac: np.ndarray) -> float:
    """Loss of link evaluated at state."""
    current = ic_current(state, link, yac)
    e_k = float(state.e_dc[_dc_index(state, link)])
    return loss_power(abs(current), e_k, link.loss_params)


def loss_gradient(
    state: "GridState",
    link: "IcLink",
    yac: np.ndarray,
    ydc: np.ndarray,
    p: LossParams,
    mode: LossDerivative = LossDerivative.SPLIT,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradient of the IC loss over the whole state.

    Args:
        state: Grid state
        link: The converter
        yac: AC admittance matrix (complex)
        ydc: DC conductance matrix (real)
        p: Loss coefficients
        mode: Derivative mode

    Returns:
        Tuple of (d/dE', d/dE'' over AC buses, d/dE over DC buses)
    """
    l = _ac_index(link)
    k = _dc_index(state, link)
    row = yac[l]
    g_row, b_row = row.real, row.imag

    current = complex(row @ state.e_ac)
    alpha, beta = current.real, current.imag
    i_mag = math.hypot(alpha, beta)

    # d(|I|^2) over E' and E''
    d_sq_re = 2.0 * (alpha * g_row + beta * b_row)
    d_sq_im = 2.0 * (-alpha * b_row + beta * g_row)
    if i_mag < CURRENT_CLAMP:
        d_mag_re = np.zeros_like(d_sq_re)
        d_mag_im = np.zeros_like(d_sq_im)
    else:
        d_mag_re = d_sq_re / (2.0 * i_mag)
        d_mag_im = d_sq_im / (2.0 * i_mag)

    grad_dc = np.zeros(len(state.e_dc))
    if mode is LossDerivative.FULL:
        e_k = float(state.e_dc[k])
        scale = p.f_sw * e_k / p.e_nom
        lin = CONDUCTION_FACTOR * p.v0 + scale * p.v
        quad = p.r0 + scale * p.w
        grad_re = lin * d_mag_re + quad * d_sq_re
        grad_im = lin * d_mag_im + quad * d_sq_im
        grad_dc[k] = p.f_sw / p.e_nom * (p.u + p.v * i_mag + p.w * i_mag**2)
    else:
        grad_re = p.v0 * d_mag_re + p.r0 * d_sq_re
        grad_im = p.v0 * d_mag_im + p.r0 * d_sq_im
        g_dc = ydc[k]
        i_dc = float(g_dc @ state.e_dc)
        grad_dc = (p.v + 2.0 * p.w * i_dc) * g_dc
    return grad_re, grad_im, np.asarray(grad_dc, dtype=float)


def loss_partials(
    state: "GridState",
    link: "IcLink",
    yac: np.ndarray,
    ydc: np.ndarray,
    p: LossParams,
    mode: LossDerivative = LossDerivative.SPLIT,
) -> LossPartials:
    """
    The six loss partials of a single-neighbour IC.

    Raises:
        ConverterError: if the AC or DC terminal has more than one neighbour
    """
    l = _ac_index(link)
    k = _dc_index(state, link)
    ac_nb = ac_neighbours(yac, l)
    dc_nb = ac_neighbours(ydc, k)
    if len(ac_nb) != 1 or len(dc_nb) != 1:
        raise ConverterError(f"IC {link.name} needs exactly one AC and one DC neighbour")
    i, j = ac_nb[0], dc_nb[0]
    grad_re, grad_im, grad_dc = loss_gradient(state, link, yac, ydc, p, mode)
    return LossPartials(
        d_ei_re=float(grad_re[i]),
        d_ei_im=float(grad_im[i]),
        d_el_re=float(grad_re[l]),
        d_el_im=float(grad_im[l]),
        d_ek=float(grad_dc[k]),
        d_ej=float(grad_dc[j]),
    )
