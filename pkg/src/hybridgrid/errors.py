#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Exceptions for hybridgrid.

Every error raised by the package derives from HybridGridError so that the
command line can map failures to a single exit code.
"""

from typing import Any, List, Optional, Sequence


class HybridGridError(Exception):
    """Base class of all hybridgrid errors."""


class ParameterError(HybridGridError, ValueError):
    """A parameter is outside its admissible range."""


# Network model


class NetworkError(HybridGridError):
    """Problem with the network description."""


class ModelValidationError(NetworkError):
    """The network model breaks one or more structural invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations: List[str] = list(violations)
        super().__init__("invalid network model: " + "; ".join(self.violations))


class DisconnectedGridError(NetworkError):
    """An AC or DC sub-grid has more than one connected component."""


class DuplicateBranchError(NetworkError):
    """Two branches join the same pair of buses without the aggregate flag."""


class FilterError(NetworkError, ValueError):
    """A converter filter has non-passive or degenerate parameters."""


class SchemaError(NetworkError):
    """A network or scenario file does not match the expected layout."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# Converter


class ConverterError(HybridGridError):
    """Invalid converter quantity or unsupported converter topology."""


# Load flow


class LoadFlowError(HybridGridError):
    """Base class of load flow failures."""


class ConvergenceError(LoadFlowError):
    """Newton iteration did not reach the tolerance."""

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        self.trace: List[float] = list(trace or [])
        super().__init__(message)


class InfeasibleFormingRootError(LoadFlowError):
    """The grid-forming closure quadratic has no real root."""

    def __init__(self, link: str, discriminant: float):
        self.link = link
        self.discriminant = discriminant
        super().__init__(f"forming closure of {link} has negative discriminant {discriminant:.3e}")


class DimensionMismatchError(LoadFlowError):
    """Setpoints or state do not match the model dimensions."""


class UnsupportedTopologyError(LoadFlowError):
    """The role assignment cannot be solved (no slack, multi-neighbour forming bus)."""


# Sensitivity coefficients


class SensitivityError(HybridGridError):
    """Base class of sensitivity failures."""


class SingularSystemError(SensitivityError):
    """The sensitivity system matrix is singular or too ill-conditioned."""

    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(f"singular sensitivity system (condition estimate {condition:.3e})")


class ControlVariableError(SensitivityError, ValueError):
    """A control variable is not admissible for the role of its bus."""


# Optimal power flow


class OpfError(HybridGridError):
    """Base class of OPF failures."""


class InfeasibleProblemError(OpfError):
    """The QP has no feasible point; tag names the most violated row."""

    def __init__(self, tag: str, violation: float = float("nan")):
        self.tag = tag
        self.violation = violation
        super().__init__(f"infeasible OPF, most violated row: {tag} ({violation:.3e})")


class QpMaxIterationsError(OpfError):
    """The QP solver stopped without reaching its tolerance."""


class SetpointBoundError(OpfError):
    """An extracted setpoint lies outside its device bounds."""


class OperatingStateError(OpfError):
    """The operating state and the network topology disagree."""


# Scenario and simulation


class ScenarioError(HybridGridError):
    """Scenario content is inconsistent."""


class ProfileUnderrunError(ScenarioError):
    """A profile ends before the simulated horizon."""


class SimulationError(HybridGridError):
    """A failure inside the simulation loop, tagged with the simulated time."""

    def __init__(self, time: float, cause: Any):
        self.time = time
        self.cause = cause
        super().__init__(f"t={time:.1f}s: {cause}")
