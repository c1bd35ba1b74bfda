"""Artificial diffusion and the algebraic stabilization limiters.

Every routine works on CSR matrices whose sparsity pattern is symmetric and
whose column indices are sorted.  Values are handled as flat ``data`` arrays
aligned with that pattern; :class:`MatrixStructure` provides the index maps
(row of each entry, position of the transposed entry, diagonal positions).

Supported methods: ``bjk``, ``mc`` (symmetric flux limiters), ``muas``,
``smuas`` (upwind-type algebraic stabilizations), ``bbk`` and ``none``
(plain Galerkin).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, ray_first_cells
from .space import DofMap, cell_gradients

METHODS = ("bjk", "mc", "muas", "smuas", "bbk", "none")
SYMMETRIC_METHODS = ("bjk", "mc")


class MatrixStructure:
    """Index maps of a CSR matrix with symmetric, sorted pattern."""

    def __init__(self, A):
        A = sp.csr_matrix(A)
        if not A.has_sorted_indices:
            A = A.sorted_indices()
        n = A.shape[0]
        self.n = n
        self.indptr = A.indptr.astype(np.int64)
        self.cols = A.indices.astype(np.int64)
        self.rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.indptr))
        keys = self.rows * n + self.cols
        if np.any(np.diff(keys) <= 0):
            raise ValueError("duplicate or unsorted column indices")
        tkeys = self.cols * n + self.rows
        pos = np.searchsorted(keys, tkeys)
        pos = np.minimum(pos, len(keys) - 1)
        if not np.array_equal(keys[pos], tkeys):
            raise ValueError("sparsity pattern is not symmetric")
        self.transpose = pos
        self.offdiag = self.rows != self.cols
        if np.any(np.diff(self.indptr) == 0) or \
                np.count_nonzero(~self.offdiag) != n:
            raise ValueError("pattern must contain the full diagonal")
        self.diag = np.flatnonzero(~self.offdiag)
        self.upper = np.flatnonzero(self.rows < self.cols)
        self.nnz = len(keys)

    def matrix(self, data) -> sp.csr_matrix:
        m = sp.csr_matrix((np.asarray(data, dtype=float), self.cols, self.indptr),
                          shape=(self.n, self.n), copy=False)
        m.has_sorted_indices = True
        return m

    def aligned(self, M) -> np.ndarray:
        """Values of ``M`` on this pattern (entries outside it must vanish)."""
        M = sp.csr_matrix(M)
        if M.shape != (self.n, self.n):
            raise ValueError("shape mismatch")
        if np.array_equal(M.indptr, self.indptr) and np.array_equal(M.indices, self.cols):
            return np.asarray(M.data, dtype=float)
        return np.asarray(M[self.rows, self.cols], dtype=float).ravel()

    def row_sum(self, values) -> np.ndarray:
        return np.bincount(self.rows, weights=values, minlength=self.n)

    def row_max(self, values) -> np.ndarray:
        return np.maximum.reduceat(values, self.indptr[:-1])

    def row_min(self, values) -> np.ndarray:
        return np.minimum.reduceat(values, self.indptr[:-1])

    def with_zero_row_sums(self, off) -> np.ndarray:
        """Full data array from off-diagonal values; diagonal = minus row sum."""
        data = np.where(self.offdiag, off, 0.0)
        data[self.diag] = -self.row_sum(data)
        return data


def structure_of(A) -> MatrixStructure:
    return MatrixStructure(A)


@dataclass
class LimiterOutput:
    """Result of one limiter evaluation.

    ``alpha`` holds the per-entry limiter values (``None`` for BBK, which
    stores ``gamma`` instead); ``B`` is the stabilization matrix;
    ``edge_weight`` holds |b_E| for every undirected edge in the order of the
    upper-triangular entries of the pattern (for a mesh pattern this is the
    order of ``mesh.edges``).
    """

    method: str
    B: sp.csr_matrix
    edge_weight: np.ndarray
    alpha: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None


def _output(method, st: MatrixStructure, b_off, alpha=None, gamma=None) -> LimiterOutput:
    data = st.with_zero_row_sums(b_off)
    w = np.maximum(np.abs(data[st.upper]), np.abs(data[st.transpose[st.upper]]))
    return LimiterOutput(method, st.matrix(data), w, alpha=alpha, gamma=gamma)


# ---------------------------------------------------------------------------
# artificial diffusion

def diffusion_values(st: MatrixStructure, a) -> np.ndarray:
    at = a[st.transpose]
    off = -np.maximum(np.maximum(a, 0.0), at)
    return st.with_zero_row_sums(off)


def artificial_diffusion(A) -> sp.csr_matrix:
    """Matrix with ``d_ij = -max(a_ij, 0, a_ji)`` off the diagonal and zero row sums."""
    st = structure_of(A)
    return st.matrix(diffusion_values(st, st.aligned(A)))


def bjk_preprocess(st: MatrixStructure, a, dirichlet_mask) -> np.ndarray:
    """Copy of ``a`` with ``a_ji := 0`` whenever ``a_ij < 0``, i free and j Dirichlet."""
    a_pre = np.array(a, dtype=float, copy=True)
    hit = st.offdiag & ~dirichlet_mask[st.rows] & dirichlet_mask[st.cols] & (a < 0)
    a_pre[st.transpose[hit]] = 0.0
    return a_pre


def _ratio(q, p):
    """min(1, q/p) with the convention 1 where p vanishes."""
    out = np.ones_like(p)
    nz = p != 0
    out[nz] = np.minimum(1.0, q[nz] / p[nz])
    return out


def _pos(x):
    return np.maximum(x, 0.0)


def _neg(x):
    return np.minimum(x, 0.0)


# ---------------------------------------------------------------------------
# linearity-preserving constants

def compute_gamma_lp(mesh: Mesh, dofs: DofMap | None = None) -> np.ndarray:
    """Per-node constant ``max_j |x_j - x_i| / dist(x_i, boundary of hull of neighbours)``.

    Boundary nodes, and nodes whose neighbour hull is degenerate, get 1.
    """
    n = mesh.n_vertices
    gamma = np.ones(n)
    e = mesh.edges
    nbr_rows = np.concatenate([e[:, 0], e[:, 1]])
    nbr_cols = np.concatenate([e[:, 1], e[:, 0]])
    order = np.lexsort((nbr_cols, nbr_rows))
    nbr_rows, nbr_cols = nbr_rows[order], nbr_cols[order]
    valence = np.bincount(nbr_rows, minlength=n)
    start = np.concatenate([[0], np.cumsum(valence)[:-1]])
    interior = ~mesh.boundary_vertices
    x = mesh.vertices
    for k in np.unique(valence[interior]):
        nodes = np.flatnonzero(interior & (valence == k))
        for chunk in np.array_split(nodes, max(1, len(nodes) * k ** 3 // 2_000_000 + 1)):
            if chunk.size == 0:
                continue
            idx = start[chunk][:, None] + np.arange(k)[None, :]
            rel = x[nbr_cols[idx]] - x[chunk][:, None, :]  # (c, k, 2)
            far = np.hypot(rel[..., 0], rel[..., 1]).max(axis=1)
            dist = _hull_distance(rel)
            good = dist > 1e-14 * far
            gamma[chunk[good]] = far[good] / dist[good]
    return gamma


def _hull_distance(rel) -> np.ndarray:
    """Distance from the origin to the boundary of the convex hull of each point set."""
    c, k, _ = rel.shape
    ia, ib = np.triu_indices(k, 1)
    pa, pb = rel[:, ia], rel[:, ib]  # (c, P, 2)
    t = pb - pa
    length = np.hypot(t[..., 0], t[..., 1])
    ok = length > 0
    nrm = np.stack([t[..., 1], -t[..., 0]], axis=-1) / np.where(ok, length, 1.0)[..., None]
    off = np.einsum("cpd,cpd->cp", nrm, pa)  # signed offset of the line
    side = np.einsum("cpd,ckd->cpk", nrm, rel) - off[..., None]
    scale = np.max(np.abs(rel), axis=(1, 2))[:, None, None]
    tol = 1e-12 * scale
    supporting = ok & (np.all(side <= tol, axis=2) | np.all(side >= -tol, axis=2))
    dist = np.where(supporting, np.abs(off), np.inf)
    out = dist.min(axis=1)
    return np.where(np.isfinite(out), out, 0.0)


# ---------------------------------------------------------------------------
# limiters operating on aligned data arrays

def _bjk(st, a_pre, d, u, dirichlet_mask, gamma):
    du = u[st.cols] - u[st.rows]
    flux = np.where(st.offdiag, d * du, 0.0)
    p_plus = st.row_sum(_pos(flux))
    p_minus = st.row_sum(_neg(flux))
    in_n = st.offdiag & ((a_pre != 0) | (a_pre[st.transpose] > 0))
    vals = np.where(in_n, u[st.cols], u[st.rows])
    umax, umin = st.row_max(vals), st.row_min(vals)
    q = gamma * st.row_sum(np.where(in_n, d, 0.0))
    r_plus = _ratio(q * (u - umax), p_plus)
    r_minus = _ratio(q * (u - umin), p_minus)
    r_plus[dirichlet_mask] = 1.0
    r_minus[dirichlet_mask] = 1.0
    abar = np.where(flux > 0, r_plus[st.rows], np.where(flux < 0, r_minus[st.rows], 1.0))
    alpha = np.minimum(abar, abar[st.transpose])
    alpha[~st.offdiag] = 1.0
    return alpha, (1.0 - alpha) * d


def _mc(st, a, d, u):
    in_s = (a != 0) | ~st.offdiag
    vals = np.where(in_s, u[st.cols], u[st.rows])
    umax, umin = st.row_max(vals), st.row_min(vals)
    up = st.upper
    i, j = st.rows[up], st.cols[up]
    dij, aij, aji = d[up], a[up], a[st.transpose[up]]
    ui, uj = u[i], u[j]
    flux = dij * (uj - ui)
    two_d_ubar_ij = dij * (ui + uj) + aij * (uj - ui)
    two_d_ubar_ji = dij * (ui + uj) + aji * (ui - uj)
    pos = flux > 0
    neg = flux < 0
    safe = np.where(flux != 0, flux, 1.0)
    n1 = np.where(pos, two_d_ubar_ij - 2 * dij * umax[i], two_d_ubar_ij - 2 * dij * umin[i])
    n2 = np.where(pos, 2 * dij * umin[j] - two_d_ubar_ji, 2 * dij * umax[j] - two_d_ubar_ji)
    val = np.minimum(1.0, np.minimum(n1 / safe, n2 / safe))
    val = np.where(pos | neg, np.clip(val, 0.0, 1.0), 0.0)
    alpha = np.ones(st.nnz)
    alpha[up] = val
    alpha[st.transpose[up]] = val
    return alpha, (1.0 - alpha) * d


def _upwind_alpha(st, u, r_plus, r_minus):
    diff = u[st.rows] - u[st.cols]
    return np.where(diff > 0, r_plus[st.rows], np.where(diff < 0, r_minus[st.rows], 1.0))


def _muas_r(st, a, u, dirichlet_mask):
    at = a[st.transpose]
    diff = u[st.rows] - u[st.cols]  # u_i - u_j
    act = st.offdiag & (a > 0)
    p_plus = st.row_sum(np.where(act, a * _pos(diff), 0.0))
    p_minus = st.row_sum(np.where(act, a * _neg(diff), 0.0))
    w = np.where(st.offdiag, np.maximum(np.abs(a), at), 0.0)
    q_plus = st.row_sum(w * _pos(-diff))
    q_minus = st.row_sum(w * _neg(-diff))
    r_plus, r_minus = _ratio(q_plus, p_plus), _ratio(q_minus, p_minus)
    r_plus[dirichlet_mask] = 1.0
    r_minus[dirichlet_mask] = 1.0
    return r_plus, r_minus


def _upwind_compose(st, a, alpha):
    t = (1.0 - alpha) * a
    return -np.maximum(np.maximum(t, 0.0), t[st.transpose])


def _muas(st, a, u, dirichlet_mask):
    r_plus, r_minus = _muas_r(st, a, u, dirichlet_mask)
    alpha = _upwind_alpha(st, u, r_plus, r_minus)
    alpha[~st.offdiag] = 1.0
    return alpha, _upwind_compose(st, a, alpha)


def _smuas(st, a, d, u, dirichlet_mask, u_reflected, muas_rows):
    at = a[st.transpose]
    in_s = st.offdiag & (a != 0)
    ui = u[st.rows]
    diff = ui - u[st.cols]
    rdiff = ui - u_reflected  # u_i - u_ij
    absd = np.abs(d)
    p_plus = st.row_sum(np.where(in_s, absd * (_pos(diff) + _pos(rdiff)), 0.0))
    p_minus = st.row_sum(np.where(in_s, absd * (_neg(diff) + _neg(rdiff)), 0.0))
    w = np.where(in_s, np.maximum(np.abs(a), at), 0.0)
    q_plus = st.row_sum(w * (_pos(-diff) + _pos(-rdiff)))
    q_minus = st.row_sum(w * (_neg(-diff) + _neg(-rdiff)))
    r_plus, r_minus = _ratio(q_plus, p_plus), _ratio(q_minus, p_minus)
    r_plus[dirichlet_mask] = 1.0
    r_minus[dirichlet_mask] = 1.0
    if np.any(muas_rows):
        mp, mm = _muas_r(st, a, u, dirichlet_mask)
        r_plus[muas_rows] = mp[muas_rows]
        r_minus[muas_rows] = mm[muas_rows]
    alpha = _upwind_alpha(st, u, r_plus, r_minus)
    alpha[~st.offdiag] = 1.0
    return alpha, _upwind_compose(st, a, alpha)


def bbk_node_indicator(st, a, u, dirichlet_mask) -> np.ndarray:
    in_s = (a != 0) & st.offdiag
    diff = np.where(in_s, u[st.rows] - u[st.cols], 0.0)
    num = np.abs(st.row_sum(diff))
    den = st.row_sum(np.abs(diff))
    out = np.zeros(st.n)
    nz = den != 0
    out[nz] = np.minimum(1.0, num[nz] / den[nz])
    out[dirichlet_mask] = 0.0
    return out


def _bbk(st, a, d, u, dirichlet_mask, p):
    ai = bbk_node_indicator(st, a, u, dirichlet_mask)
    gamma = np.maximum(ai[st.rows], ai[st.cols]) ** p
    gamma[~st.offdiag] = 0.0
    return gamma, d * gamma


# ---------------------------------------------------------------------------
# SMUAS reflection data

@dataclass
class SmuasCache:
    """Per off-diagonal entry (i, j): the cell hit by the ray from x_i away from x_j.

    ``cells[k] == -1`` marks entries without such a cell.  ``mesh_id`` ties
    the cache to one mesh object.
    """

    mesh_id: int
    cells: np.ndarray
    offset: np.ndarray  # x_i - x_j per entry

    def valid_for(self, mesh: Mesh) -> bool:
        return self.mesh_id == id(mesh) and mesh.__dict__.get("_smuas_cache") is self


def build_smuas_cache(mesh: Mesh, st: MatrixStructure) -> SmuasCache:
    cached = mesh.__dict__.get("_smuas_cache")
    if cached is not None and cached.valid_for(mesh) and len(cached.cells) == st.nnz:
        return cached
    off = np.flatnonzero(st.offdiag)
    x = mesh.vertices
    direction = x[st.rows[off]] - x[st.cols[off]]
    cells = np.full(st.nnz, -1, dtype=np.int64)
    cells[off] = ray_first_cells(mesh, st.rows[off], direction)
    offset = np.zeros((st.nnz, 2))
    offset[off] = direction
    cache = SmuasCache(id(mesh), cells, offset)
    mesh.__dict__["_smuas_cache"] = cache
    return cache


def reflected_values(mesh: Mesh, st: MatrixStructure, cache: SmuasCache, u) -> np.ndarray:
    """``u_ij = u_i + grad u_h|_K . (x_i - x_j)`` per entry; ``u_i`` where no cell exists."""
    grads = cell_gradients(mesh, u)
    out = u[st.rows].astype(float)
    ok = cache.cells >= 0
    out[ok] += np.einsum("kd,kd->k", grads[cache.cells[ok]], cache.offset[ok])
    return out


def _smuas_fallback_rows(st, cache, neumann_nodes):
    missing = st.offdiag & (cache.cells < 0)
    rows = np.zeros(st.n, dtype=bool)
    rows[st.rows[missing]] = True
    return rows | neumann_nodes


def neumann_nodes(mesh: Mesh, dofs: DofMap) -> np.ndarray:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[mesh.edges[mesh.boundary_edges].ravel()] = True
    return mask & ~dofs.dirichlet_mask


# ---------------------------------------------------------------------------
# public operations on matrices

def limiter_bjk(A_pre, D, u, dofs: DofMap, mesh: Mesh | None = None, gamma_i=None) -> LimiterOutput:
    """BJK limiter.  ``A_pre`` is the preprocessed stiffness matrix, ``D`` its diffusion."""
    st = structure_of(A_pre)
    if gamma_i is None:
        if mesh is None:
            raise ValueError("either mesh or gamma_i is required")
        gamma_i = compute_gamma_lp(mesh, dofs)
    alpha, b = _bjk(st, st.aligned(A_pre), st.aligned(D), np.asarray(u, dtype=float),
                    dofs.dirichlet_mask, np.asarray(gamma_i, dtype=float))
    return _output("bjk", st, b, alpha=alpha)


def limiter_mc(A, D, u, dofs: DofMap) -> LimiterOutput:
    st = structure_of(A)
    alpha, b = _mc(st, st.aligned(A), st.aligned(D), np.asarray(u, dtype=float))
    return _output("mc", st, b, alpha=alpha)


def limiter_muas(A, u, dofs: DofMap) -> LimiterOutput:
    st = structure_of(A)
    alpha, b = _muas(st, st.aligned(A), np.asarray(u, dtype=float), dofs.dirichlet_mask)
    return _output("muas", st, b, alpha=alpha)


def limiter_smuas(A, D, u, dofs: DofMap, mesh: Mesh, cache: SmuasCache | None = None) -> LimiterOutput:
    st = structure_of(A)
    if cache is None or not cache.valid_for(mesh):
        cache = build_smuas_cache(mesh, st)
    u = np.asarray(u, dtype=float)
    rows = _smuas_fallback_rows(st, cache, neumann_nodes(mesh, dofs))
    alpha, b = _smuas(st, st.aligned(A), st.aligned(D), u, dofs.dirichlet_mask,
                      reflected_values(mesh, st, cache, u), rows)
    return _output("smuas", st, b, alpha=alpha)


def limiter_bbk(A, D, u, dofs: DofMap, p: float = 10) -> LimiterOutput:
    if p < 1:
        raise ValueError("the BBK exponent must be at least 1")
    st = structure_of(A)
    gamma, b = _bbk(st, st.aligned(A), st.aligned(D), np.asarray(u, dtype=float),
                    dofs.dirichlet_mask, p)
    return _output("bbk", st, b, gamma=gamma)


def stabilization_action(B, v, free_mask=None) -> np.ndarray:
    """``B v`` restricted to free nodes (zero in the other rows)."""
    out = sp.csr_matrix(B) @ np.asarray(v, dtype=float)
    if free_mask is not None:
        out = np.where(free_mask, out, 0.0)
    return out


def afc_double_sum(alpha, D, v, w) -> float:
    """Direct evaluation of sum_ij (1 - alpha_ij) d_ij (v_j - v_i) w_i."""
    D = sp.coo_matrix(D)
    al = np.asarray(alpha, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.sum((1.0 - al) * D.data * (v[D.col] - v[D.row]) * w[D.row]))


# ---------------------------------------------------------------------------
# stateful evaluator used by the nonlinear solver

class Stabilizer:
    """Limiter bound to one mesh and one stiffness matrix.

    Parameters
    ----------
    method : one of :data:`METHODS`
    mesh, dofs : discretization
    A : Galerkin matrix (Dirichlet rows not yet modified)
    bbk_p : exponent of the BBK method
    gamma : optional per-node constants for BJK (default :func:`compute_gamma_lp`)
    """

    def __init__(self, method: str, mesh: Mesh, dofs: DofMap, A, bbk_p: float = 10,
                 gamma=None):
        method = method.lower()
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        self.method = method
        self.mesh = mesh
        self.dofs = dofs
        self.st = structure_of(A)
        self.a = self.st.aligned(A)
        self.bbk_p = bbk_p
        if method == "none":
            self.d = np.zeros(self.st.nnz)
        elif method == "bjk":
            self.a_lim = bjk_preprocess(self.st, self.a, dofs.dirichlet_mask)
            self.d = diffusion_values(self.st, self.a_lim)
            self.gamma = compute_gamma_lp(mesh, dofs) if gamma is None \
                else np.asarray(gamma, dtype=float)
        else:
            self.d = diffusion_values(self.st, self.a)
        if method == "smuas":
            self.cache = build_smuas_cache(mesh, self.st)
            self.muas_rows = _smuas_fallback_rows(self.st, self.cache, neumann_nodes(mesh, dofs))

    @property
    def D(self) -> sp.csr_matrix:
        return self.st.matrix(self.d)

    def b_values(self, u) -> np.ndarray:
        """Full data array of B(u) on the pattern."""
        return self(u, data_only=True)

    def __call__(self, u, data_only: bool = False):
        u = np.asarray(u, dtype=float)
        st, mask = self.st, self.dofs.dirichlet_mask
        alpha = gamma = None
        if self.method == "none":
            b = np.zeros(st.nnz)
            alpha = np.ones(st.nnz)
        elif self.method == "bjk":
            alpha, b = _bjk(st, self.a_lim, self.d, u, mask, self.gamma)
        elif self.method == "mc":
            alpha, b = _mc(st, self.a, self.d, u)
        elif self.method == "muas":
            alpha, b = _muas(st, self.a, u, mask)
        elif self.method == "smuas":
            alpha, b = _smuas(st, self.a, self.d, u, mask,
                              reflected_values(self.mesh, st, self.cache, u), self.muas_rows)
        else:
            gamma, b = _bbk(st, self.a, self.d, u, mask, self.bbk_p)
        if data_only:
            return st.with_zero_row_sums(b)
        return _output(self.method, st, b, alpha=alpha, gamma=gamma)
