"""Continuous piecewise linear finite elements on a :class:`~afcadapt.mesh.Mesh`.

The degrees of freedom are the mesh vertices.  All matrices produced here and
in :mod:`afcadapt.stabilize` share one CSR sparsity pattern (vertex adjacency
plus the diagonal), so their ``data`` arrays can be combined entry by entry.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import DIRICHLET, NEUMANN, Mesh, MeshError, barycentric, locate_points

# ---------------------------------------------------------------------------
# quadrature rules on the reference triangle, barycentric points + weights
# (weights sum to one and are multiplied by the cell area)

EDGE_MIDPOINT_RULE = (
    np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]),
    np.full(3, 1.0 / 3.0),
)

_a1, _b1 = 0.445948490915965, 0.108103018168070
_a2, _b2 = 0.091576213509771, 0.816847572980459
_w1, _w2 = 0.223381589678011, 0.109951743655322
DEGREE4_RULE = (
    np.array([[_b1, _a1, _a1], [_a1, _b1, _a1], [_a1, _a1, _b1],
              [_b2, _a2, _a2], [_a2, _b2, _a2], [_a2, _a2, _b2]]),
    np.array([_w1, _w1, _w1, _w2, _w2, _w2]),
)

GAUSS2_LINE = (
    np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]),
    np.array([0.5, 0.5]),
)


@dataclass(frozen=True)
class ProblemDefinition:
    """Steady convection-diffusion-reaction problem ``-eps lap u + b.grad u + c u = f``.

    All coefficient callables are vectorized over coordinate arrays.
    ``convection(x, y, u)`` returns a pair ``(bx, by)``; ``u`` holds the
    discrete solution at the same points and is ignored by linear problems.
    """

    epsilon: float
    convection: Callable
    reaction: Callable
    source: Callable
    sigma: float
    dirichlet: Callable
    neumann: Optional[Callable] = None
    exact: Optional[Callable] = None
    exact_gradient: Optional[Callable] = None
    is_nonlinear: bool = False
    name: str = ""

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


class DofMap:
    """P1 degrees of freedom: one per vertex, Dirichlet iff on a Dirichlet edge."""

    def __init__(self, mesh: Mesh):
        self.n = mesh.n_vertices
        mask = np.zeros(self.n, dtype=bool)
        dir_edges = mesh.edges[mesh.edge_tags == DIRICHLET]
        mask[dir_edges.ravel()] = True
        mask.setflags(write=False)
        self.dirichlet_mask = mask
        self.dirichlet = np.flatnonzero(mask)
        self.free = np.flatnonzero(~mask)

    @property
    def n_free(self) -> int:
        return len(self.free)

    def __repr__(self):
        return f"DofMap(n={self.n}, free={self.n_free})"


class SparsePattern:
    """CSR pattern of the vertex adjacency graph plus the diagonal.

    Besides ``indptr``/``indices`` it keeps index maps used throughout the
    package: ``transpose[k]`` is the position of entry (j, i) for entry
    k = (i, j); ``diag`` the diagonal positions; ``rows`` the row of every
    entry; ``cell_pos`` the (M, 3, 3) positions of the local element matrix.
    """

    def __init__(self, mesh: Mesh):
        n = mesh.n_vertices
        e = mesh.edges
        rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
        keys = np.sort(rows * n + cols)
        self.n = n
        self.nnz = len(keys)
        self.rows = keys // n
        self.indices = keys % n
        self.indptr = np.searchsorted(self.rows, np.arange(n + 1)).astype(np.int64)
        self._keys = keys
        self.transpose = self.position(self.indices, self.rows)
        self.diag = self.position(np.arange(n), np.arange(n))
        self.offdiag = self.rows != self.indices
        c = mesh.cells
        self.cell_pos = self.position(c[:, :, None], c[:, None, :])
        # entry positions of each undirected edge (lower id row first)
        self.edge_pos = self.position(e[:, 0], e[:, 1])
        self.edge_pos_t = self.position(e[:, 1], e[:, 0])
        for arr in (self.rows, self.indices, self.indptr, self.transpose, self.diag,
                    self.offdiag, self.cell_pos, self.edge_pos, self.edge_pos_t):
            arr.setflags(write=False)

    def position(self, i, j) -> np.ndarray:
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        i, j = np.broadcast_arrays(i, j)
        key = i * self.n + j
        pos = np.searchsorted(self._keys, key)
        ok = pos < self.nnz
        ok[ok] = self._keys[pos[ok]] == key[ok]
        if not np.all(ok):
            raise KeyError("entry outside the sparsity pattern")
        return pos

    def matrix(self, data) -> sp.csr_matrix:
        data = np.asarray(data, dtype=float)
        if data.shape != (self.nnz,):
            raise ValueError("data does not match the pattern")
        m = sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n), copy=False)
        m.has_sorted_indices = True
        return m

    def row_sums(self, data) -> np.ndarray:
        return np.bincount(self.rows, weights=data, minlength=self.n)

    def accumulate(self, positions, values) -> np.ndarray:
        return np.bincount(np.ravel(positions), weights=np.ravel(values), minlength=self.nnz)


def sparse_pattern(mesh: Mesh) -> SparsePattern:
    """Pattern for ``mesh``, built once and cached on the mesh object."""
    cache = mesh.__dict__.get("_pattern_cache")
    if cache is None:
        cache = SparsePattern(mesh)
        mesh.__dict__["_pattern_cache"] = cache
    return cache


def dof_map(mesh: Mesh) -> DofMap:
    cache = mesh.__dict__.get("_dofmap_cache")
    if cache is None:
        cache = DofMap(mesh)
        mesh.__dict__["_dofmap_cache"] = cache
    return cache


# ---------------------------------------------------------------------------
# evaluation helpers

def quadrature_points(mesh: Mesh, rule) -> np.ndarray:
    """Physical quadrature points, shape (M, Q, 2)."""
    bary, _ = rule
    return np.einsum("qk,mkd->mqd", bary, mesh.vertices[mesh.cells])


def values_at(mesh: Mesh, u, rule) -> np.ndarray:
    """Values of the P1 function with nodal vector ``u`` at the rule's points, (M, Q)."""
    bary, _ = rule
    return np.asarray(u, dtype=float)[mesh.cells] @ bary.T


def cell_gradients(mesh: Mesh, u) -> np.ndarray:
    """Constant gradient of the P1 function on every cell, shape (M, 2)."""
    return np.einsum("mk,mkd->md", np.asarray(u, dtype=float)[mesh.cells],
                     mesh.geometry.grad_basis)


def _convection_at(problem: ProblemDefinition, pts, uq):
    bx, by = problem.convection(pts[..., 0], pts[..., 1], uq)
    shape = pts.shape[:-1]
    return np.broadcast_to(np.asarray(bx, dtype=float), shape), \
        np.broadcast_to(np.asarray(by, dtype=float), shape)


def _scalar_at(fn, pts):
    return np.broadcast_to(np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float),
                           pts.shape[:-1])


def assemble_galerkin(mesh: Mesh, dofs: DofMap, problem: ProblemDefinition, u_prev=None):
    """Galerkin stiffness matrix and load vector, before Dirichlet imposition.

    Returns
    -------
    A : scipy.sparse.csr_matrix on the shared pattern of ``mesh``
    F : ndarray of length ``dofs.n``
    """
    if problem.is_nonlinear and u_prev is None:
        raise ValueError("a nonlinear problem needs the previous iterate u_prev")
    geo = mesh.geometry
    area = geo.area
    if np.any(area <= 0):
        raise MeshError("degenerate cell in assembly")
    g = geo.grad_basis
    pattern = sparse_pattern(mesh)

    local = problem.epsilon * area[:, None, None] * np.einsum("mid,mjd->mij", g, g)

    bary, w = EDGE_MIDPOINT_RULE
    pts = quadrature_points(mesh, EDGE_MIDPOINT_RULE)
    uq = values_at(mesh, u_prev, EDGE_MIDPOINT_RULE) if u_prev is not None \
        else np.zeros(pts.shape[:-1])
    bx, by = _convection_at(problem, pts, uq)
    bgrad = bx[:, :, None] * g[:, None, :, 0] + by[:, :, None] * g[:, None, :, 1]
    local += area[:, None, None] * np.einsum("q,qi,mqj->mij", w, bary, bgrad)

    bary4, w4 = DEGREE4_RULE
    pts4 = quadrature_points(mesh, DEGREE4_RULE)
    c4 = _scalar_at(problem.reaction, pts4)
    if np.any(c4):
        local += area[:, None, None] * np.einsum("q,mq,qi,qj->mij", w4, c4, bary4, bary4)

    data = pattern.accumulate(pattern.cell_pos, local)
    A = pattern.matrix(data)

    fq = _scalar_at(problem.source, pts)
    floc = area[:, None] * np.einsum("q,mq,qi->mi", w, fq, bary)
    F = np.bincount(mesh.cells.ravel(), weights=floc.ravel(), minlength=dofs.n)
    F += neumann_load(mesh, problem)
    return A, F


def neumann_load(mesh: Mesh, problem: ProblemDefinition) -> np.ndarray:
    """Boundary contribution of the Neumann data, two-point Gauss per edge."""
    out = np.zeros(mesh.n_vertices)
    if problem.neumann is None:
        return out
    ne = np.flatnonzero(mesh.edge_tags == NEUMANN)
    if ne.size == 0:
        return out
    a = mesh.vertices[mesh.edges[ne, 0]]
    b = mesh.vertices[mesh.edges[ne, 1]]
    length = mesh.edge_lengths[ne]
    t, w = GAUSS2_LINE
    for tq, wq in zip(t, w):
        p = (1 - tq) * a + tq * b
        g = np.asarray(problem.neumann(p[:, 0], p[:, 1]), dtype=float) * np.ones(len(ne))
        out += np.bincount(mesh.edges[ne, 0], weights=wq * length * g * (1 - tq),
                           minlength=len(out))
        out += np.bincount(mesh.edges[ne, 1], weights=wq * length * g * tq,
                           minlength=len(out))
    return out


def dirichlet_values(mesh: Mesh, dofs: DofMap, problem: ProblemDefinition) -> np.ndarray:
    """Nodal boundary data on the Dirichlet nodes (zero elsewhere)."""
    out = np.zeros(dofs.n)
    x = mesh.vertices[dofs.dirichlet]
    out[dofs.dirichlet] = np.asarray(problem.dirichlet(x[:, 0], x[:, 1]), dtype=float) \
        * np.ones(len(x))
    return out


def apply_dirichlet(A, F, dofs: DofMap, u_dirichlet):
    """Overwrite Dirichlet rows by identity rows and set ``F_i = u_D(x_i)``.

    Columns are left untouched.  ``u_dirichlet`` is a full-length nodal
    vector; only its Dirichlet entries are used.  Returns new objects.
    """
    A = sp.csr_matrix(A, copy=True)
    A.sort_indices()
    F = np.array(F, dtype=float, copy=True)
    if dofs.dirichlet.size:
        rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
        hit = dofs.dirichlet_mask[rows]
        A.data[hit] = 0.0
        diag_hit = hit & (A.indices == rows)
        A.data[diag_hit] = 1.0
        missing = np.setdiff1d(dofs.dirichlet, rows[diag_hit])
        if missing.size:
            A = A + sp.csr_matrix((np.ones(len(missing)), (missing, missing)), shape=A.shape)
        F[dofs.dirichlet] = np.asarray(u_dirichlet, dtype=float)[dofs.dirichlet]
    return A, F


def evaluate_fe_points(mesh: Mesh, u, points) -> np.ndarray:
    """Evaluate the P1 function at many points; NaN for points outside the mesh."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cells = locate_points(mesh, pts)
    out = np.full(len(pts), np.nan)
    ok = cells >= 0
    if np.any(ok):
        lam = barycentric(mesh, cells[ok], pts[ok])
        out[ok] = np.einsum("pk,pk->p", lam, np.asarray(u, dtype=float)[mesh.cells[cells[ok]]])
    return out


def evaluate_fe(mesh: Mesh, u, p) -> float:
    """Value of the P1 function at one point ``p`` inside the domain."""
    val = evaluate_fe_points(mesh, u, np.asarray(p, dtype=float).reshape(1, 2))[0]
    if np.isnan(val):
        raise ValueError(f"point {tuple(np.ravel(p))} lies outside the domain")
    return float(val)


def interpolate(mesh: Mesh, fn) -> np.ndarray:
    """Nodal interpolant of ``fn(x, y)``."""
    x = mesh.vertices
    return np.asarray(fn(x[:, 0], x[:, 1]), dtype=float) * np.ones(mesh.n_vertices)
