"""Neural DER dispatch with solver-free feasibility restoration on radial feeders."""
from .network import DistFlowMatrices, NetworkData, build_matrices, load_network
from .powerflow import (
    FeasibilityReport,
    PowerFlowDivergence,
    PowerFlowError,
    SystemState,
    VoltageCollapse,
    check_feasibility,
    evaluate_objective,
    solve_power_flow,
)

__version__ = "0.1.0"
