"""Damped fixed-point iteration for the stabilized nonlinear systems.

Linear problems use a constant system matrix ``A + D`` that is factorized
once; the right-hand side carries the current stabilization.  Problems
whose convection depends on the solution reassemble ``A(U) + B(U)`` every
iteration.  Both loops share a residual-monotone damping controller.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh
from .space import (DofMap, ProblemDefinition, apply_dirichlet, assemble_galerkin,
                    dirichlet_values)
from .stabilize import LimiterOutput, Stabilizer


class LinearSolveError(RuntimeError):
    """The system matrix could not be factorized."""


@dataclass(frozen=True)
class SolverConfig:
    residual_factor: float = 1e-8
    max_iterations: int = 10_000
    omega_init: float = 1.0
    omega_shrink: float = 0.5
    omega_grow: float = 1.2
    grow_after: int = 5
    omega_min: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.omega_shrink < 1.0:
            raise ValueError("omega_shrink must lie in (0, 1)")
        if self.omega_grow < 1.0:
            raise ValueError("omega_grow must be at least 1")
        if not 0.0 < self.omega_init <= 1.0:
            raise ValueError("omega_init must lie in (0, 1]")
        if self.max_iterations < 1 or self.grow_after < 1:
            raise ValueError("max_iterations and grow_after must be positive")

    def tolerance(self, n_dofs: int) -> float:
        return self.residual_factor * np.sqrt(n_dofs)


@dataclass
class SolveReport:
    iterations: int
    rejections: int
    final_residual: float
    converged: bool
    wall_time: float
    tolerance: float = float("nan")
    message: str = ""


@dataclass
class DampingState:
    omega: float = 1.0
    streak: int = 0


class DampingUnderflow(RuntimeError):
    pass


def damping_step(u_prev, u_tilde, residual_prev, residual_new, state: DampingState,
                 config: SolverConfig = SolverConfig()):
    """Accept or reject the trial ``u_prev + omega (u_tilde - u_prev)``.

    ``residual_new`` is the residual at that trial.  Returns
    ``(u_next, new_state, accepted)``; on rejection ``u_next`` is ``u_prev``
    itself and the caller retries with the reduced ``omega``.
    """
    if residual_new <= residual_prev:
        u_next = u_prev + state.omega * (np.asarray(u_tilde) - u_prev)
        streak = state.streak + 1
        omega = state.omega
        if streak >= config.grow_after:
            omega = min(1.0, omega * config.omega_grow)
            streak = 0
        return u_next, DampingState(omega, streak), True
    omega = state.omega * config.omega_shrink
    if omega < config.omega_min:
        raise DampingUnderflow(f"damping parameter fell below {config.omega_min}")
    return u_prev, DampingState(omega, 0), False


class LinearSolver:
    """Sparse LU factorization reused for many right-hand sides."""

    def __init__(self, matrix):
        m = sp.csc_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise LinearSolveError("matrix is not square")
        try:
            self._lu = splu(m)
        except RuntimeError as exc:
            raise LinearSolveError(str(exc)) from exc

    def solve(self, rhs) -> np.ndarray:
        x = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("non-finite solution, matrix is numerically singular")
        return x


def linear_solve(matrix, rhs) -> np.ndarray:
    return LinearSolver(matrix).solve(rhs)


@dataclass
class SolveResult:
    u: np.ndarray
    report: SolveReport
    limiter: LimiterOutput
    A: sp.csr_matrix
    F: np.ndarray


def _free_norm(r, free):
    return float(np.linalg.norm(r[free]))


def initial_iterate(dofs: DofMap, u_dir, u0=None) -> np.ndarray:
    u = np.zeros(dofs.n) if u0 is None else np.array(u0, dtype=float, copy=True)
    if u.shape != (dofs.n,):
        raise ValueError("initial iterate has the wrong length")
    u[dofs.dirichlet] = u_dir[dofs.dirichlet]
    return u


def _iterate(u, propose: Callable, evaluate: Callable, dofs: DofMap, config: SolverConfig,
             started: float):
    """Shared damped loop.

    ``evaluate(U)`` returns ``(residual, state)`` and ``propose(U, state)``
    returns the undamped update.  ``state`` is whatever the callbacks need to
    carry between the two (stabilization values, assembled matrices).
    """
    tol = config.tolerance(dofs.n)
    res, state = evaluate(u)
    damping = DampingState(config.omega_init, 0)
    iterations = rejections = 0
    message = ""
    while iterations < config.max_iterations:
        u_tilde = propose(u, state)
        iterations += 1
        while True:
            trial = u + damping.omega * (u_tilde - u)
            res_t, state_t = evaluate(trial)
            try:
                _, damping, accepted = damping_step(u, u_tilde, res, res_t, damping, config)
            except DampingUnderflow as exc:
                message = str(exc)
                accepted = None
            if accepted is None:
                break
            if accepted:
                u, res, state = trial, res_t, state_t
                break
            rejections += 1
        if accepted is None or res <= tol:
            break
    converged = bool(res <= tol)
    if not converged and not message:
        message = "iteration limit reached"
    report = SolveReport(iterations, rejections, res, converged, time.perf_counter() - started,
                         tol, message)
    return u, report, state


def solve_problem(mesh: Mesh, dofs: DofMap, problem: ProblemDefinition, method: str,
                  config: SolverConfig = SolverConfig(), u0=None, bbk_p: float = 10,
                  gamma=None) -> SolveResult:
    """Solve the stabilized discrete problem on one mesh."""
    if problem.is_nonlinear:
        return _solve_nonlinear(mesh, dofs, problem, method, config, u0, bbk_p, gamma)
    return _solve_linear(mesh, dofs, problem, method, config, u0, bbk_p, gamma)


def _solve_linear(mesh, dofs, problem, method, config, u0, bbk_p, gamma) -> SolveResult:
    started = time.perf_counter()
    A, F = assemble_galerkin(mesh, dofs, problem)
    stab = Stabilizer(method, mesh, dofs, A, bbk_p=bbk_p, gamma=gamma)
    st = stab.st
    u_dir = dirichlet_values(mesh, dofs, problem)
    system, _ = apply_dirichlet(st.matrix(stab.a + stab.d), F, dofs, u_dir)
    solver = LinearSolver(system)
    free = dofs.free
    a, d = stab.a, stab.d

    def evaluate(v):
        b = stab.b_values(v)
        r = st.matrix(a + b) @ v - F
        return _free_norm(r, free), b

    def propose(v, b):
        rhs = F + st.matrix(d - b) @ v
        rhs[dofs.dirichlet] = u_dir[dofs.dirichlet]
        return solver.solve(rhs)

    u = initial_iterate(dofs, u_dir, u0)
    u, report, _ = _iterate(u, propose, evaluate, dofs, config, started)
    return SolveResult(u, report, stab(u), A, F)


def _solve_nonlinear(mesh, dofs, problem, method, config, u0, bbk_p, gamma) -> SolveResult:
    started = time.perf_counter()
    u_dir = dirichlet_values(mesh, dofs, problem)
    free = dofs.free
    if method == "bjk" and gamma is None:
        from .stabilize import compute_gamma_lp
        gamma = compute_gamma_lp(mesh, dofs)

    def evaluate(v):
        A, F = assemble_galerkin(mesh, dofs, problem, u_prev=v)
        stab = Stabilizer(method, mesh, dofs, A, bbk_p=bbk_p, gamma=gamma)
        b = stab.b_values(v)
        r = stab.st.matrix(stab.a + b) @ v - F
        return _free_norm(r, free), (stab, b, F)

    def propose(v, state):
        stab, b, F = state
        system, rhs = apply_dirichlet(stab.st.matrix(stab.a + b), F, dofs, u_dir)
        return linear_solve(system, rhs)

    u = initial_iterate(dofs, u_dir, u0)
    u, report, state = _iterate(u, propose, evaluate, dofs, config, started)
    stab, _, F = state
    return SolveResult(u, report, stab(u), stab.st.matrix(stab.a), F)


def solve_linear_problem(mesh, dofs, problem, method, config=SolverConfig(), u0=None):
    if problem.is_nonlinear:
        raise ValueError("problem is nonlinear; use solve_nonlinear_problem")
    res = _solve_linear(mesh, dofs, problem, method, config, u0, 10, None)
    return res.u, res.report


def solve_nonlinear_problem(mesh, dofs, problem, method, config=SolverConfig(), u0=None):
    if not problem.is_nonlinear:
        problem = replace(problem, is_nonlinear=True)
    res = _solve_nonlinear(mesh, dofs, problem, method, config, u0, 10, None)
    return res.u, res.report
