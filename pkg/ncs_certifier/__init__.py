"""Stability certificates for networked control systems under TOD and Round-Robin scheduling."""

__version__ = "0.1.0"

from .lmi import LmiProblem, assemble_theorem1, assemble_theorem2
from .lyapunov import FunctionalSpec, VerificationReport, eval_functional, verify_runs
from .model import ClosedLoopModel, NetworkModel, PlantModel, build_closed_loop
from .scenario import Scenario, load_scenario
from .sdp import CertificateWitness, SolverOptions, Status, solve_feasibility
from .search import SearchSpec, max_alpha, max_tau, table_run
from .simulator import Trajectory, generate_timing, simulate

__all__ = [
    "__version__",
    "LmiProblem",
    "assemble_theorem1",
    "assemble_theorem2",
    "FunctionalSpec",
    "VerificationReport",
    "eval_functional",
    "verify_runs",
    "ClosedLoopModel",
    "NetworkModel",
    "PlantModel",
    "build_closed_loop",
    "Scenario",
    "load_scenario",
    "CertificateWitness",
    "SolverOptions",
    "Status",
    "solve_feasibility",
    "SearchSpec",
    "max_alpha",
    "max_tau",
    "table_run",
    "Trajectory",
    "generate_timing",
    "simulate",
]
