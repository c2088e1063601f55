"""Carbon-aware energy management with learned carbon-emission-flow constraints.

The package covers the full pipeline: network case handling and linearized AC
power flow, exact carbon emission flow (CEF) accounting with storage, scenario
sampling and labeling, sparse ReLU network training, exact big-M MILP encoding
of trained networks, a self-contained LP/branch-and-bound solver, and the
carbon-aware dispatch models built on top.
"""

__version__ = "0.1.0"

from .network import NetworkCase, DispatchState, load_case
from .milp import MilpModel, SolveResult

__all__ = [
    "NetworkCase",
    "DispatchState",
    "load_case",
    "MilpModel",
    "SolveResult",
    "__version__",
]
