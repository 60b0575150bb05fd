#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Islanding and resynchronisation control

This module holds the operating state machine of the grid connection point
(GCP), the command sequences that move the microgrid between grid-connected
and islanded operation, the synchro-check and the angle PI controller used
while resynchronising.

    GridConnected --island trigger--> PrepareForIsland --criteria met--> Island
    PrepareForIsland --cancel--> GridConnected
    Island --restore trigger--> Resynchronisation --synchro-check--> GridConnected
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import ParameterError
from .utils.phasor import wrap_angle_deg

logger = logging.getLogger(__name__)


class OperatingState(str, Enum):
    GRID_CONNECTED = "grid_connected"
    PREPARE_FOR_ISLAND = "prepare_for_island"
    ISLAND = "island"
    RESYNCHRONISATION = "resynchronisation"


class ControlEvent(str, Enum):
    ISLAND_TRIGGER = "island_trigger"
    RESTORE_TRIGGER = "restore_trigger"
    CANCEL = "cancel"


class Command(str, Enum):
    ESS_TO_VOLTAGE_MODE = "ess_to_voltage_mode"
    IC_TO_FORMING = "ic_to_forming"
    OPEN_BREAKER = "open_breaker"
    CLOSE_BREAKER = "close_breaker"
    IC_TO_FOLLOWING = "ic_to_following"
    ESS_TO_POWER_MODE = "ess_to_power_mode"


LEGAL_TRANSITIONS = frozenset(
    {
        (OperatingState.GRID_CONNECTED, OperatingState.PREPARE_FOR_ISLAND),
        (OperatingState.PREPARE_FOR_ISLAND, OperatingState.ISLAND),
        (OperatingState.PREPARE_FOR_ISLAND, OperatingState.GRID_CONNECTED),
        (OperatingState.ISLAND, OperatingState.RESYNCHRONISATION),
        (OperatingState.RESYNCHRONISATION, OperatingState.GRID_CONNECTED),
    }
)


@dataclass(frozen=True)
class TransitionCommandSequence:
    """Commands with their delays (s) relative to the transition instant."""

    entries: Tuple[Tuple[float, Command], ...]

    @classmethod
    def islanding(cls, breaker_delay: float = 2.0) -> "TransitionCommandSequence":
        return cls(
            (
                (0.0, Command.ESS_TO_VOLTAGE_MODE),
                (0.0, Command.IC_TO_FORMING),
                (breaker_delay, Command.OPEN_BREAKER),
            )
        )

    @classmethod
    def resynchronisation(cls) -> "TransitionCommandSequence":
        return cls(
            (
                (0.0, Command.CLOSE_BREAKER),
                (0.0, Command.IC_TO_FOLLOWING),
                (0.0, Command.ESS_TO_POWER_MODE),
            )
        )

    @property
    def commands(self) -> Tuple[Command, ...]:
        return tuple(command for _, command in self.entries)

    def ordering_violations(self) -> List[str]:
        """The breaker must open after forming mode and close before following mode."""
        found = []
        delays = [delay for delay, _ in self.entries]
        if delays != sorted(delays):
            found.append("delays are not monotonic")
        order = {command: index for index, (_, command) in enumerate(self.entries)}
        opens = order.get(Command.OPEN_BREAKER)
        if opens is not None and order.get(Command.IC_TO_FORMING, len(order)) > opens:
            found.append("breaker opens before the IC is grid-forming")
        closes = order.get(Command.CLOSE_BREAKER)
        if closes is not None and order.get(Command.IC_TO_FOLLOWING, -1) < closes:
            found.append("IC leaves grid-forming mode before the breaker closes")
        return found


@dataclass(frozen=True)
class TransitionCriteria:
    """Thresholds (p.u.) on GCP and forming-IC powers that allow islanding."""

    epsilon_p: float = 0.005
    epsilon_q: float = 0.005


@dataclass(frozen=True)
class Phasor:
    """Voltage magnitude (V), angle (degrees) and frequency (Hz)."""

    magnitude: float
    angle: float
    frequency: float


@dataclass(frozen=True)
class SynchroCheckTolerances:
    magnitude: float = 5.0
    angle: float = 2.0
    frequency: float = 0.02


@dataclass(frozen=True)
class GcpMeasurements:
    """
    Quantities the state machine looks at every tick.

    Powers are per unit; upstream and downstream phasors are taken across the
    open GCP breaker.
    """

    p_gcp: float
    q_gcp: float
    p_forming: float
    q_forming: float
    upstream: Optional[Phasor] = None
    downstream: Optional[Phasor] = None


def synchro_check(upstream: Phasor, downstream: Phasor, tol: SynchroCheckTolerances) -> bool:
    """
    True when magnitude, wrapped angle and frequency differences are all inside tol.
    """
    return (
        abs(upstream.magnitude - downstream.magnitude) <= tol.magnitude
        and abs(wrap_angle_deg(upstream.angle - downstream.angle)) <= tol.angle
        and abs(upstream.frequency - downstream.frequency) <= tol.frequency
    )


@dataclass
class PiState:
    """
    Angle PI controller producing a frequency offset (Hz) from an angle error (degrees).

    Attributes:
        kp: Proportional gain (Hz per degree)
        ki: Integral gain (Hz per degree second)
        f_max: Output saturation (Hz)
        period: Controller period (s)
        integral: Integrated angle error (degree seconds)
    """

    kp: float = 0.002
    ki: float = 0.0004
    f_max: float = 0.1
    period: float = 0.1
    integral: float = 0.0

    def __post_init__(self) -> None:
        if self.kp < 0 or self.ki < 0 or self.f_max <= 0 or self.period <= 0:
            raise ParameterError("PI gains must be non-negative, f_max and period positive")

    def reset(self) -> None:
        self.integral = 0.0


def angle_pi_step(angle_error: float, pi: PiState, dt: float) -> float:
    """
    One PI step with clamping anti-windup; updates pi.integral in place.

    Args:
        angle_error: Upstream minus downstream angle (degrees)
        pi: Controller state
        dt: Time since the previous step (s)

    Returns:
        float: Frequency offset (Hz), always within [-f_max, f_max]
    """
    error = wrap_angle_deg(angle_error)
    candidate = pi.integral + error * dt
    unclamped = pi.kp * error + pi.ki * candidate
    saturated = abs(unclamped) > pi.f_max
    # integrate only while unsaturated or when the error unwinds the integrator
    if not saturated or error * candidate < 0:
        pi.integral = candidate
    if pi.ki > 0:
        bound = pi.f_max / pi.ki
        pi.integral = min(max(pi.integral, -bound), bound)
    output = pi.kp * error + pi.ki * pi.integral
    return min(max(output, -pi.f_max), pi.f_max)


def criteria_met(measurements: GcpMeasurements, criteria: TransitionCriteria) -> bool:
    return (
        abs(measurements.p_gcp) < criteria.epsilon_p
        and abs(measurements.q_gcp) < criteria.epsilon_q
        and abs(measurements.p_forming) < criteria.epsilon_p
        and abs(measurements.q_forming) < criteria.epsilon_q
    )


def step(
    state: OperatingState,
    signals: Iterable[ControlEvent],
    measurements: GcpMeasurements,
    criteria: TransitionCriteria,
    synchro_tolerances: SynchroCheckTolerances = SynchroCheckTolerances(),
    breaker_delay: float = 2.0,
) -> Tuple[OperatingState, Optional[TransitionCommandSequence]]:
    """
    Advance the operating state by one tick.

    Events that are not legal in the current state are ignored.

    Returns:
        Tuple of (new state, command sequence to start or None)
    """
    signals = set(signals)
    if state is OperatingState.GRID_CONNECTED:
        if ControlEvent.ISLAND_TRIGGER in signals:
            return OperatingState.PREPARE_FOR_ISLAND, None
    elif state is OperatingState.PREPARE_FOR_ISLAND:
        if ControlEvent.CANCEL in signals:
            return OperatingState.GRID_CONNECTED, None
        if criteria_met(measurements, criteria):
            return OperatingState.ISLAND, TransitionCommandSequence.islanding(breaker_delay)
    elif state is OperatingState.ISLAND:
        if ControlEvent.RESTORE_TRIGGER in signals:
            return OperatingState.RESYNCHRONISATION, None
    elif state is OperatingState.RESYNCHRONISATION:
        up, down = measurements.upstream, measurements.downstream
        if up is not None and down is not None and synchro_check(up, down, synchro_tolerances):
            return OperatingState.GRID_CONNECTED, TransitionCommandSequence.resynchronisation()
    for signal in signals:
        logger.debug("event %s ignored in state %s", signal.value, state.value)
    return state, None


@dataclass
class StateMachine:
    """
    Stateful wrapper around step that records every transition.

    Attributes:
        state: Current operating state
        criteria: Islanding thresholds
        synchro_tolerances: Synchro-check tolerances
        breaker_delay: Delay between forming mode and breaker opening (s)
        transitions: (time, from, to) of every transition taken
    """

    state: OperatingState = OperatingState.GRID_CONNECTED
    criteria: TransitionCriteria = field(default_factory=TransitionCriteria)
    synchro_tolerances: SynchroCheckTolerances = field(default_factory=SynchroCheckTolerances)
    breaker_delay: float = 2.0
    transitions: List[Tuple[float, OperatingState, OperatingState]] = field(default_factory=list)

    def tick(
        self, time: float, signals: Sequence[ControlEvent], measurements: GcpMeasurements
    ) -> Optional[TransitionCommandSequence]:
        new_state, sequence = step(
            self.state,
            signals,
            measurements,
            self.criteria,
            self.synchro_tolerances,
            self.breaker_delay,
        )
        logger.info(
            "t=%.1f state=%s p_gcp=%.4f q_gcp=%.4f p_form=%.4f q_form=%.4f cmds=%s",
            time,
            new_state.value,
            measurements.p_gcp,
            measurements.q_gcp,
            measurements.p_forming,
            measurements.q_forming,
            ",".join(c.value for c in sequence.commands) if sequence else "-",
        )
        if new_state is not self.state:
            if (self.state, new_state) not in LEGAL_TRANSITIONS:
                raise AssertionError(f"illegal transition {self.state} -> {new_state}")
            self.transitions.append((time, self.state, new_state))
            self.state = new_state
        return sequence


class PiController:
    """Angle PI controller stepping at its own period."""

    def __init__(self, state: Optional[PiState] = None):
        self.state = state or PiState()
        self.output = 0.0

    def step(self, angle_error: float) -> float:
        self.output = angle_pi_step(angle_error, self.state, self.state.period)
        return self.output

    def reset(self) -> None:
        self.state.reset()
        self.output = 0.0
