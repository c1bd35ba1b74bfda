"""Maximum marking with a minimum fraction and the adaptive driver."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .estimate import EstimatorConstants, assemble_estimate, energy_norm_error
from .mesh import Mesh
from .nlsolve import SolverConfig, solve_problem
from .problems import BenchmarkCase, cutline_sample
from .refine import refine_red_green, refine_uniform
from .report import osc_metric, smear_metric
from .space import dof_map


@dataclass(frozen=True)
class MarkingConfig:
    ref_tol: float = 0.5
    min_ref: float = 0.05
    relax: float = 0.8
    dof_budget: int = 250_000
    initial_uniform_steps: int = 2

    def __post_init__(self):
        if not 0.0 < self.ref_tol < 1.0:
            raise ValueError("ref_tol must lie in (0, 1)")
        if not 0.0 < self.min_ref < 1.0:
            raise ValueError("min_ref must lie in (0, 1)")
        if not 0.0 < self.relax < 1.0:
            raise ValueError("relax must lie in (0, 1)")
        if self.dof_budget < 1 or self.initial_uniform_steps < 0:
            raise ValueError("dof_budget must be positive, initial_uniform_steps non-negative")


def mark_cells(eta_per_cell, config: MarkingConfig = MarkingConfig()) -> np.ndarray:
    """Cells with ``eta_K >= t * max(eta)``; ``t`` starts at ``ref_tol`` and is
    multiplied by ``relax`` until at least ``min_ref`` of the cells are marked.

    Returns sorted cell ids.  Nothing is marked when every indicator is zero.
    """
    eta = np.asarray(eta_per_cell, dtype=float)
    if eta.size == 0 or np.any(eta < 0) or not np.all(np.isfinite(eta)):
        if eta.size == 0:
            return np.zeros(0, dtype=np.int64)
        raise ValueError("indicators must be finite and non-negative")
    eta_max = eta.max()
    if eta_max == 0:
        return np.zeros(0, dtype=np.int64)
    needed = config.min_ref * eta.size
    positive = int(np.count_nonzero(eta > 0))
    t = config.ref_tol
    while True:
        marked = np.flatnonzero(eta >= t * eta_max)
        if marked.size >= needed or marked.size >= positive:
            return marked
        t *= config.relax


@dataclass
class LevelRecord:
    level: int
    dofs: int
    cells: int
    eta: float
    eta1: float
    eta2: float
    eta3: float
    err_l2: float = math.nan
    err_h1: float = math.nan
    err_energy: float = math.nan
    effectivity: float = math.nan
    smear: float = math.nan
    osc: float = math.nan
    iters: int = 0
    rejects: int = 0
    converged: bool = True
    residual: float = math.nan
    marked: int = 0
    seconds: float = 0.0


@dataclass
class AdaptiveTrace:
    case: str
    grid: str
    method: str
    levels: list = field(default_factory=list)
    final_mesh: Optional[Mesh] = None
    final_u: Optional[np.ndarray] = None
    config: dict = field(default_factory=dict)

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.levels)


def transfer_solution(old: Mesh, new: Mesh, u_old) -> np.ndarray:
    """Nodal interpolation onto a refined mesh whose new vertices are edge midpoints."""
    u = np.empty(new.n_vertices)
    n_old = old.n_vertices
    u[:n_old] = u_old
    parents = new.vertex_parents
    for v in range(n_old, new.n_vertices):
        a, b = parents[v]
        u[v] = 0.5 * (u[a] + u[b])
    return u


def _transfer(old: Mesh, new: Mesh, u_old) -> np.ndarray:
    # vectorized by generations: a vertex only depends on vertices created before it
    u = np.full(new.n_vertices, np.nan)
    u[:old.n_vertices] = u_old
    todo = np.arange(old.n_vertices, new.n_vertices)
    parents = new.vertex_parents
    while todo.size:
        a, b = parents[todo, 0], parents[todo, 1]
        ready = ~np.isnan(u[a]) & ~np.isnan(u[b])
        if not np.any(ready):
            return transfer_solution(old, new, u_old)
        u[todo[ready]] = 0.5 * (u[a[ready]] + u[b[ready]])
        todo = todo[~ready]
    return u


def run_adaptive(case: BenchmarkCase, grid, method: str,
                 marking: MarkingConfig = MarkingConfig(),
                 solver: SolverConfig = SolverConfig(),
                 constants: EstimatorConstants = EstimatorConstants(),
                 cutline_intervals: int = 100_000, bbk_p: float = 10,
                 level_callback: Callable | None = None) -> AdaptiveTrace:
    """SOLVE, ESTIMATE, MARK, REFINE until the dof budget is reached.

    The initial uniform steps are solved as well; every solve starts from
    the previous level's solution interpolated onto the new mesh.
    ``level_callback(record, mesh, u)`` is called after every level.
    """
    problem = case.problem
    trace = AdaptiveTrace(case.name, str(grid), method, config={
        "marking": asdict(marking), "solver": asdict(solver), "constants": asdict(constants),
        "cutline_intervals": cutline_intervals, "bbk_p": bbk_p, "epsilon": problem.epsilon,
        "sigma": problem.sigma})
    mesh = case.root_mesh(grid)
    u_prev, mesh_prev = None, None
    uniform_left = marking.initial_uniform_steps
    if uniform_left:
        mesh = refine_uniform(mesh, case.curve)
        uniform_left -= 1
    level = 0
    while True:
        dofs = dof_map(mesh)
        u0 = None if u_prev is None else _transfer(mesh_prev, mesh, u_prev)
        started = time.perf_counter()
        result = solve_problem(mesh, dofs, problem, method, solver, u0=u0, bbk_p=bbk_p)
        est = assemble_estimate(mesh, dofs, problem, result.u, result.limiter, constants)
        seconds = time.perf_counter() - started
        rec = LevelRecord(level, dofs.n, mesh.n_cells, est.eta, est.eta1, est.eta2, est.eta3,
                          iters=result.report.iterations, rejects=result.report.rejections,
                          converged=result.report.converged,
                          residual=result.report.final_residual, seconds=seconds)
        if problem.exact is not None:
            err = energy_norm_error(mesh, problem, result.u)
            rec.err_l2, rec.err_h1, rec.err_energy = err.l2, err.h1, err.energy
            if err.energy > 0:
                rec.effectivity = est.eta / err.energy
        rec.osc = osc_metric(result.u)
        if case.smear_cutline is not None:
            samples = cutline_sample(mesh, result.u, case.cutlines[case.smear_cutline],
                                     cutline_intervals)
            rec.smear = smear_metric(samples)

        stop = False
        if uniform_left > 0:
            new_mesh = refine_uniform(mesh, case.curve)
            uniform_left -= 1
        elif dofs.n >= marking.dof_budget:
            stop = True
        else:
            marked = mark_cells(est.cell_indicator, marking)
            rec.marked = int(marked.size)
            if marked.size == 0:
                stop = True
            else:
                new_mesh = refine_red_green(mesh, marked, case.curve)
        trace.levels.append(rec)
        if level_callback is not None:
            level_callback(rec, mesh, result.u)
        if stop:
            trace.final_mesh, trace.final_u = mesh, result.u
            return trace
        mesh_prev, u_prev, mesh = mesh, result.u, new_mesh
        level += 1
