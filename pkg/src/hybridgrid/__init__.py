"""
Hybrid Grid

A package for hybrid AC/DC microgrids with grid-forming interfacing
converters: load flow, sensitivity coefficients, sensitivity-based OPF,
islanding control and quasi-static simulation.
"""

__version__ = "0.1.0"

from .control import OperatingState, StateMachine
from .loadflow import GridState, SetpointSet, solve
from .network import NetworkModel, load_network
from .opf import build, solve_qp
from .sensitivity import compute
from .sim import Simulator, load_scenario, run

__all__ = [
    "GridState",
    "NetworkModel",
    "OperatingState",
    "SetpointSet",
    "Simulator",
    "StateMachine",
    "build",
    "compute",
    "load_network",
    "load_scenario",
    "run",
    "solve",
    "solve_qp",
]
