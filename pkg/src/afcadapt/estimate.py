"""Residual a posteriori error estimator in the energy norm.

The estimator has three parts: element residuals (``eta1``), face
residuals (``eta2``) and a term driven by the stabilization matrix
(``eta3``).  With ``sigma == 0`` every ``min{.,.}`` weight takes its
epsilon-scaled argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import CellGeometry, DIRICHLET, Mesh, NEUMANN
from .space import (DEGREE4_RULE, GAUSS2_LINE, DofMap, ProblemDefinition, cell_gradients,
                    quadrature_points, values_at)
from .stabilize import LimiterOutput

EDGE_CONSTANT_FACTOR = 4.0 * np.sqrt(2.0) * (1.0 + np.sqrt(2.0))


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConstants:
    C_I: float = 1.0
    C_F: float = 1.0
    C: float = 1.0
    C_inv: float = 1.0

    def kappa(self, c_edge):
        """Return ``(kappa1, kappa2)`` for edge constants ``c_edge``."""
        common = self.C * np.asarray(c_edge) * (1.0 + (1.0 + self.C_I) ** 2)
        return common, self.C_inv ** 2 * common


@dataclass
class EstimateBreakdown:
    eta1_sq: np.ndarray  # per cell
    eta2_sq: np.ndarray  # per edge (face), zero on Dirichlet faces
    eta3_sq: np.ndarray  # per edge
    cell_indicator_sq: np.ndarray

    @property
    def eta1(self) -> float:
        return float(np.sqrt(self.eta1_sq.sum()))

    @property
    def eta2(self) -> float:
        return float(np.sqrt(self.eta2_sq.sum()))

    @property
    def eta3(self) -> float:
        return float(np.sqrt(self.eta3_sq.sum()))

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.eta1_sq.sum() + self.eta2_sq.sum() + self.eta3_sq.sum()))

    @property
    def cell_indicator(self) -> np.ndarray:
        return np.sqrt(self.cell_indicator_sq)


@dataclass(frozen=True)
class ErrorNorms:
    l2: float
    h1: float
    energy: float


def edge_constant(geometry: CellGeometry) -> np.ndarray:
    """Per-cell ``4 sqrt2 (1 + sqrt2) |K| / (1 - C_cos rho_K^3)``, C_cos the largest cosine."""
    c_cos = np.cos(np.atleast_2d(geometry.angles)).max(axis=1)
    rho = np.atleast_1d(geometry.rho)
    denom = 1.0 - c_cos * rho ** 3
    bad = np.flatnonzero(denom <= 0)
    if bad.size:
        raise EstimatorError(f"edge constant undefined on cell {int(bad[0])}: "
                             f"1 - C_cos rho^3 = {denom[bad[0]]:.3e}")
    return EDGE_CONSTANT_FACTOR * np.atleast_1d(geometry.area) / denom


def _weight(scaled_eps, sigma_term, sigma):
    """min{a, b} where ``b`` is only finite for positive sigma."""
    if sigma > 0:
        return np.minimum(scaled_eps, sigma_term)
    return np.asarray(scaled_eps, dtype=float)


def element_residual_norms_sq(mesh: Mesh, problem: ProblemDefinition, u_h) -> np.ndarray:
    """``||f - b.grad u_h - c u_h||^2`` on every cell (degree-4 quadrature)."""
    pts = quadrature_points(mesh, DEGREE4_RULE)
    _, w = DEGREE4_RULE
    uq = values_at(mesh, u_h, DEGREE4_RULE)
    grad = cell_gradients(mesh, u_h)
    bx, by = problem.convection(pts[..., 0], pts[..., 1], uq)
    f = problem.source(pts[..., 0], pts[..., 1])
    c = problem.reaction(pts[..., 0], pts[..., 1])
    r = f - (bx * grad[:, None, 0] + by * grad[:, None, 1]) - c * uq
    r = np.broadcast_to(r, uq.shape)
    return mesh.geometry.area * (r ** 2 @ w)


def edge_normals(mesh: Mesh) -> np.ndarray:
    """Unit normals per edge, pointing out of the lower-id adjacent cell."""
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    t = (b - a) / mesh.edge_lengths[:, None]
    n = np.stack([t[:, 1], -t[:, 0]], axis=1)
    centre = mesh.barycenters[mesh.edge_cells[:, 0]]
    flip = np.einsum("ed,ed->e", n, 0.5 * (a + b) - centre) < 0
    n[flip] *= -1
    return n


def face_residual_norms_sq(mesh: Mesh, problem: ProblemDefinition, u_h) -> np.ndarray:
    """``||R_F||^2`` per edge: epsilon-scaled normal jumps, Neumann defects, 0 on Dirichlet."""
    eps = problem.epsilon
    grad = cell_gradients(mesh, u_h)
    n = edge_normals(mesh)
    h = mesh.edge_lengths
    k1, k2 = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
    out = np.zeros(mesh.n_edges)
    inner = k2 >= 0
    jump = np.einsum("ed,ed->e", grad[k1[inner]] - grad[k2[inner]], n[inner])
    out[inner] = h[inner] * (eps * jump) ** 2
    neu = np.flatnonzero(mesh.edge_tags == NEUMANN)
    if neu.size:
        flux = eps * np.einsum("ed,ed->e", grad[k1[neu]], n[neu])
        a = mesh.vertices[mesh.edges[neu, 0]]
        b = mesh.vertices[mesh.edges[neu, 1]]
        t, w = GAUSS2_LINE
        acc = np.zeros(len(neu))
        for tq, wq in zip(t, w):
            p = (1 - tq) * a + tq * b
            g = np.zeros(len(neu)) if problem.neumann is None \
                else np.asarray(problem.neumann(p[:, 0], p[:, 1]), dtype=float) * np.ones(len(neu))
            acc += wq * (g - flux) ** 2
        out[neu] = h[neu] * acc
    out[mesh.edge_tags == DIRICHLET] = 0.0
    return out


def tangential_terms(mesh: Mesh, u_h) -> np.ndarray:
    """``h_E^{-1} ||grad u_h . t_E||^2_E = (u_j - u_i)^2 / h_E^2`` per edge."""
    u = np.asarray(u_h, dtype=float)
    du = u[mesh.edges[:, 1]] - u[mesh.edges[:, 0]]
    return du ** 2 / mesh.edge_lengths ** 2


def assemble_estimate(mesh: Mesh, dofs: DofMap, problem: ProblemDefinition, u_h,
                      limiter_output: LimiterOutput | None,
                      constants: EstimatorConstants = EstimatorConstants()) -> EstimateBreakdown:
    eps, sigma = problem.epsilon, problem.sigma
    if eps <= 0 and sigma <= 0:
        raise EstimatorError("both epsilon and sigma vanish")
    geo = mesh.geometry
    ci2, cf2 = constants.C_I ** 2, constants.C_F ** 2
    sig = sigma if sigma > 0 else 1.0

    w1 = _weight(4 * ci2 * geo.h ** 2 / eps, 4 * ci2 / sig, sigma)
    eta1_sq = w1 * element_residual_norms_sq(mesh, problem, u_h)

    h = mesh.edge_lengths
    w2 = _weight(4 * cf2 * h / eps, 4 * cf2 / np.sqrt(sig * eps), sigma)
    eta2_sq = w2 * face_residual_norms_sq(mesh, problem, u_h)

    if limiter_output is None:
        eta3_sq = np.zeros(mesh.n_edges)
    else:
        weight = np.asarray(limiter_output.edge_weight, dtype=float)
        if weight.shape != (mesh.n_edges,):
            raise EstimatorError("limiter output does not match the mesh edges")
        c_cell = edge_constant(geo)
        k1, k2 = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
        c_edge = np.where(k2 >= 0, np.maximum(c_cell[k1], c_cell[np.maximum(k2, 0)]), c_cell[k1])
        kappa1, kappa2 = constants.kappa(c_edge)
        w3 = _weight(4 * kappa1 * h ** 2 / eps, 4 * kappa2 / sig, sigma)
        eta3_sq = w3 * weight ** 2 * tangential_terms(mesh, u_h)

    return EstimateBreakdown(eta1_sq, eta2_sq, eta3_sq,
                             cell_indicators_sq(mesh, eta1_sq, eta2_sq, eta3_sq))


def cell_indicators_sq(mesh: Mesh, eta1_sq, eta2_sq, eta3_sq) -> np.ndarray:
    """Per-cell share: own element term plus an equal split of each edge term."""
    edge_sq = eta2_sq + eta3_sq
    k1, k2 = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
    inner = k2 >= 0
    share = np.where(inner, 0.5 * edge_sq, edge_sq)
    out = np.array(eta1_sq, dtype=float, copy=True)
    out += np.bincount(k1, weights=share, minlength=mesh.n_cells)
    out += np.bincount(k2[inner], weights=share[inner], minlength=mesh.n_cells)
    return out


def energy_norm_error(mesh: Mesh, problem: ProblemDefinition, u_h) -> ErrorNorms:
    """L2, H1-seminorm and energy-norm errors against the exact solution."""
    if problem.exact is None or problem.exact_gradient is None:
        raise EstimatorError("problem has no exact solution")
    pts = quadrature_points(mesh, DEGREE4_RULE)
    _, w = DEGREE4_RULE
    area = mesh.geometry.area
    e = problem.exact(pts[..., 0], pts[..., 1]) - values_at(mesh, u_h, DEGREE4_RULE)
    gx, gy = problem.exact_gradient(pts[..., 0], pts[..., 1])
    grad = cell_gradients(mesh, u_h)
    ex, ey = gx - grad[:, None, 0], gy - grad[:, None, 1]
    l2_sq = float(area @ (e ** 2 @ w))
    h1_sq = float(area @ ((ex ** 2 + ey ** 2) @ w))
    energy = np.sqrt(problem.epsilon * h1_sq + problem.sigma * l2_sq)
    return ErrorNorms(np.sqrt(l2_sq), np.sqrt(h1_sq), float(energy))
