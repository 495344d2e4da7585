"""Convex MPC for safe output consensus of nonlinear multi-agent systems.

The package combines a directed-graph consensus cost, linearized plant
dynamics, tangent-halfplane convexification of keep-out constraints, and an
internal dense QP solver into a receding-horizon controller, plus a
closed-loop simulation harness with logging, metrics, plotting and a CLI.
"""

__version__ = "0.1.0"

from .graph import Topology, has_spanning_tree, in_neighbors, laplacian
from .dynamics import LinearizedStep, PlantModel, UnicycleModel
from .barrier import (
    AffineBarrier,
    AffineForm,
    BarrierParams,
    CircularObstacle,
    DegenerateGeometryError,
    InfeasibleNominalError,
    SafetyRow,
    build_safety_rows,
    dhcbf_affine,
    distance_margin,
    nearest_boundary_point,
    supporting_halfplane,
    tangent_halfplane,
    z_coefficients,
)
from .qp import (
    KktResiduals,
    QpProblem,
    QpSolution,
    QpSolver,
    QpStatus,
    SolverSettings,
    kkt_residuals,
    polish,
    solve,
)
from .engine import (
    BoxBounds,
    CmpcConfig,
    CmpcEngine,
    ConstraintInstance,
    DecisionLayout,
    FeasibilityMargin,
    NominalTrajectory,
    SqpIteration,
    SqpTrace,
)
from .simulate import (
    RunLog,
    Scenario,
    SimulationAborted,
    builtin_scenario_path,
    export,
    load_run_log,
    metrics,
    run_closed_loop,
)

__all__ = [
    "__version__",
    "Topology", "laplacian", "in_neighbors", "has_spanning_tree",
    "PlantModel", "UnicycleModel", "LinearizedStep",
    "CircularObstacle", "AffineBarrier", "AffineForm", "BarrierParams",
    "SafetyRow", "DegenerateGeometryError", "InfeasibleNominalError",
    "distance_margin", "nearest_boundary_point", "tangent_halfplane",
    "supporting_halfplane", "z_coefficients", "dhcbf_affine", "build_safety_rows",
    "QpProblem", "QpSolution", "QpSolver", "QpStatus", "SolverSettings",
    "KktResiduals", "solve", "kkt_residuals", "polish",
    "BoxBounds", "CmpcConfig", "CmpcEngine", "ConstraintInstance",
    "DecisionLayout", "FeasibilityMargin", "NominalTrajectory",
    "SqpIteration", "SqpTrace",
    "Scenario", "RunLog", "SimulationAborted", "run_closed_loop",
    "metrics", "export", "load_run_log", "builtin_scenario_path",
]
