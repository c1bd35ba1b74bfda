"""Adaptive P1 finite elements with algebraic stabilization for steady
convection-diffusion-reaction problems."""
from .adapt import MarkingConfig, mark_cells, run_adaptive
from .estimate import EstimatorConstants, assemble_estimate, energy_norm_error
from .mesh import Mesh, build_mesh, locate_point, read_mesh, write_mesh
from .nlsolve import SolverConfig, solve_problem
from .problems import CASES, get_case, make_root_grid
from .refine import refine_red_green, refine_uniform
from .space import DofMap, ProblemDefinition, assemble_galerkin
from .stabilize import METHODS, Stabilizer

__version__ = "0.1.0"

__all__ = [
    "CASES", "DofMap", "EstimatorConstants", "METHODS", "MarkingConfig", "Mesh",
    "ProblemDefinition", "SolverConfig", "Stabilizer", "assemble_estimate",
    "assemble_galerkin", "build_mesh", "energy_norm_error", "get_case", "locate_point",
    "make_root_grid", "mark_cells", "read_mesh", "refine_red_green", "refine_uniform",
    "run_adaptive", "solve_problem", "write_mesh",
]
