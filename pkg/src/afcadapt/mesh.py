"""Conforming triangular meshes.

A :class:`Mesh` stores vertex coordinates and counterclockwise vertex
triples together with the derived edge table, boundary classification and
the red/green genealogy needed by :mod:`afcadapt.refine`.  Meshes are
treated as immutable: refinement returns a new object.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2

ROOT = 0
RED = 1
GREEN = 2

_TAG_CODES = {"D": DIRICHLET, "N": NEUMANN, DIRICHLET: DIRICHLET, NEUMANN: NEUMANN}
_TAG_NAMES = {DIRICHLET: "D", NEUMANN: "N"}

# local edge k of a cell is opposite local vertex k
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class MeshError(ValueError):
    """Raised for invalid mesh input (non-conforming, degenerate, untagged)."""


@dataclass(frozen=True)
class CellGeometry:
    area: np.ndarray
    h: np.ndarray
    rho: np.ndarray
    angles: np.ndarray
    grad_basis: np.ndarray


def _signed_areas(vertices, cells):
    p0 = vertices[cells[:, 0]]
    d1 = vertices[cells[:, 1]] - p0
    d2 = vertices[cells[:, 2]] - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


class Mesh:
    """Conforming 2D simplicial mesh.

    Parameters
    ----------
    vertices : (N, 2) array
    cells : (M, 3) int array, counterclockwise
    edge_tags : dict mapping sorted vertex pairs of boundary edges to
        ``DIRICHLET`` or ``NEUMANN``
    vertex_parents : (N, 2) int array, endpoints of the edge a vertex was
        created on (``-1`` for root vertices)
    cell_origin : (M,) ``ROOT``/``RED``/``GREEN``
    cell_generation : (M,) number of red refinements since the root cell
    green_parent : (M, 3) vertex triple of the red parent of a green cell
        (``-1`` for non-green cells)

    Use :func:`build_mesh` for raw input; this constructor assumes
    counterclockwise cells.
    """

    def __init__(self, vertices, cells, edge_tags: Mapping[tuple[int, int], int],
                 vertex_parents=None, cell_origin=None, cell_generation=None,
                 green_parent=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        n, m = len(self.vertices), len(self.cells)
        if vertex_parents is None:
            vertex_parents = np.full((n, 2), -1, dtype=np.int64)
        if cell_origin is None:
            cell_origin = np.full(m, ROOT, dtype=np.int8)
        if cell_generation is None:
            cell_generation = np.zeros(m, dtype=np.int64)
        if green_parent is None:
            green_parent = np.full((m, 3), -1, dtype=np.int64)
        self.vertex_parents = np.asarray(vertex_parents, dtype=np.int64)
        self.cell_origin = np.asarray(cell_origin, dtype=np.int8)
        self.cell_generation = np.asarray(cell_generation, dtype=np.int64)
        self.green_parent = np.asarray(green_parent, dtype=np.int64)
        for arr in (self.vertices, self.cells, self.vertex_parents, self.cell_origin,
                    self.cell_generation, self.green_parent):
            arr.setflags(write=False)

        if m and (self.cells.min() < 0 or self.cells.max() >= n):
            raise MeshError("cell references a vertex that does not exist")
        areas = _signed_areas(self.vertices, self.cells)
        bad = np.flatnonzero(areas <= 0.0)
        if bad.size:
            raise MeshError(f"cell {bad[0]} has non-positive signed area {areas[bad[0]]}")
        self._build_edges(edge_tags)

    def _build_edges(self, edge_tags):
        m = len(self.cells)
        local = self.cells[:, LOCAL_EDGES]  # (M, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        keys = pairs[:, 0] * np.int64(len(self.vertices)) + pairs[:, 1]
        ukeys, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        edges = np.stack(np.divmod(ukeys, np.int64(len(self.vertices))), axis=1)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            e = edges[np.argmax(counts)]
            raise MeshError(f"non-conforming input: edge {tuple(e)} shared by more than two cells")
        cell_of = np.repeat(np.arange(m), 3)
        order = np.lexsort((cell_of, inverse))
        first = np.full(len(edges), -1, dtype=np.int64)
        second = np.full(len(edges), -1, dtype=np.int64)
        inv_sorted = inverse[order]
        cells_sorted = cell_of[order]
        start = np.r_[True, inv_sorted[1:] != inv_sorted[:-1]]
        first[inv_sorted[start]] = cells_sorted[start]
        rest = ~start
        second[inv_sorted[rest]] = cells_sorted[rest]

        self.edges = edges.astype(np.int64)
        self.edge_cells = np.stack([first, second], axis=1)
        self.cell_edges = inverse.reshape(m, 3)

        tags = np.zeros(len(edges), dtype=np.int8)
        boundary = np.flatnonzero(second < 0)
        seen = set()
        for e in boundary:
            key = (int(edges[e, 0]), int(edges[e, 1]))
            tag = edge_tags.get(key)
            if tag is None:
                raise MeshError(f"boundary edge {key} carries no boundary tag")
            tags[e] = _TAG_CODES[tag]
            seen.add(key)
        extra = [k for k in edge_tags if k not in seen]
        if extra:
            raise MeshError(f"boundary tag given for interior or unknown edge {extra[0]}")
        self.edge_tags = tags
        for arr in (self.edges, self.edge_cells, self.cell_edges, self.edge_tags):
            arr.setflags(write=False)

    @cached_property
    def _edge_index_map(self):
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.edges)}

    def edge_index(self, a: int, b: int) -> int:
        """Index of the edge joining vertices ``a`` and ``b``."""
        return self._edge_index_map[(min(a, b), max(a, b))]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    def boundary_tag_dict(self) -> dict[tuple[int, int], int]:
        return {(int(self.edges[e, 0]), int(self.edges[e, 1])): int(self.edge_tags[e])
                for e in self.boundary_edges}

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    @cached_property
    def geometry(self) -> CellGeometry:
        return cell_geometry(self.vertices, self.cells)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def vertex_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR-style (offsets, cell ids) of cells incident to each vertex, ascending."""
        flat = self.cells.ravel()
        cell_of = np.repeat(np.arange(self.n_cells), 3)
        order = np.lexsort((cell_of, flat))
        offsets = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.add.at(offsets, flat + 1, 1)
        return np.cumsum(offsets), cell_of[order]

    def cells_around(self, i: int) -> np.ndarray:
        offsets, ids = self.vertex_cells
        return ids[offsets[i]:offsets[i + 1]]

    @cached_property
    def midpoint_lookup(self) -> dict[tuple[int, int], int]:
        """Map sorted parent edge -> vertex created at its midpoint."""
        out = {}
        for v in np.flatnonzero(self.vertex_parents[:, 0] >= 0):
            a, b = self.vertex_parents[v]
            out[(int(min(a, b)), int(max(a, b)))] = int(v)
        return out

    @cached_property
    def total_area(self) -> float:
        return float(self.geometry.area.sum())

    def __repr__(self):
        return f"Mesh(vertices={self.n_vertices}, cells={self.n_cells}, edges={self.n_edges})"


def cell_geometry(vertices, cells) -> CellGeometry:
    p = vertices[cells]  # (M, 3, 2)
    # edge k opposite vertex k
    e = p[:, LOCAL_EDGES[:, 1]] - p[:, LOCAL_EDGES[:, 0]]
    lengths = np.hypot(e[..., 0], e[..., 1])
    area = _signed_areas(vertices, cells)
    perimeter = lengths.sum(axis=1)
    # gradient of barycentric lambda_k is the inward normal of edge k scaled by len/(2|K|)
    rot = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    grads = rot / (2.0 * area[:, None, None])
    # interior angle at vertex k from the law of cosines
    a2 = lengths ** 2
    cosines = np.empty_like(lengths)
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        cosines[:, k] = (a2[:, i] + a2[:, j] - a2[:, k]) / (2 * lengths[:, i] * lengths[:, j])
    angles = np.arccos(np.clip(cosines, -1.0, 1.0))
    return CellGeometry(area=area, h=lengths.max(axis=1), rho=4.0 * area / perimeter,
                        angles=angles, grad_basis=grads)


def build_mesh(points, triangles, boundary_spec) -> Mesh:
    """Build a :class:`Mesh` from raw points and triangles.

    ``boundary_spec`` is either a mapping from vertex pairs to ``"D"``/``"N"``
    or a callable ``spec(x, y)`` evaluated at boundary edge midpoints.
    Clockwise triangles are reordered to counterclockwise.
    """
    points = np.asarray(points, dtype=float)
    tri = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if tri.size and (tri.min() < 0 or tri.max() >= len(points)):
        raise MeshError("triangle references a point index out of range")
    area = _signed_areas(points, tri)
    if np.any(area == 0.0):
        raise MeshError(f"zero-area triangle {int(np.flatnonzero(area == 0.0)[0])}")
    cw = area < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]

    pairs = np.sort(tri[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError(f"non-conforming input: edge {tuple(edges[np.argmax(counts)])} "
                        "shared by more than two cells")
    tags = {}
    for a, b in edges[counts == 1]:
        key = (int(a), int(b))
        if callable(boundary_spec):
            mid = 0.5 * (points[a] + points[b])
            tag = boundary_spec(mid[0], mid[1])
        else:
            tag = boundary_spec.get(key, boundary_spec.get((key[1], key[0])))
        if tag is None:
            raise MeshError(f"boundary edge {key} carries no boundary tag")
        tags[key] = _TAG_CODES[tag]
    return Mesh(points, tri, tags)


def point_in_cells(mesh: Mesh, cells, points, tol=1e-12):
    """Barycentric containment test, row-wise for ``cells[k]`` and ``points[k]``."""
    lam = barycentric(mesh, cells, points)
    return np.all(lam >= -tol, axis=-1)


def barycentric(mesh: Mesh, cells, points):
    cells = np.asarray(cells)
    points = np.asarray(points, dtype=float)
    p = mesh.vertices[mesh.cells[cells]]
    grads = mesh.geometry.grad_basis[cells]
    # lambda_k(x) = 1/3 + grad_k . (x - barycenter)
    centre = p.mean(axis=-2)
    return 1.0 / 3.0 + np.einsum("...kd,...d->...k", grads, points - centre)


@dataclass
class _Locator:
    tree: cKDTree


def _locator(mesh: Mesh):
    loc = mesh.__dict__.get("_locator_cache")
    if loc is None:
        loc = _Locator(cKDTree(mesh.vertices))
        mesh.__dict__["_locator_cache"] = loc
    return loc


def _cell_neighbours_by_vertex(mesh: Mesh, c: int) -> np.ndarray:
    return np.unique(np.concatenate([mesh.cells_around(int(v)) for v in mesh.cells[c]]))


def locate_points(mesh: Mesh, points, tol=1e-12) -> np.ndarray:
    """Vectorised point location; returns cell ids, ``-1`` outside the mesh.

    Among several closed cells containing a point the lowest id is returned.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.full(len(pts), -1, dtype=np.int64)
    if len(pts) == 0:
        return out
    offsets, ids = mesh.vertex_cells
    _, nearest = _locator(mesh).tree.query(pts, k=3)
    for col in range(nearest.shape[1]):
        todo = np.flatnonzero(out < 0)
        if todo.size == 0:
            break
        v = nearest[todo, col]
        counts = offsets[v + 1] - offsets[v]
        rep = np.repeat(todo, counts)
        starts = np.repeat(offsets[v], counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = ids[starts + local]
        inside = point_in_cells(mesh, cand, pts[rep], tol)
        hit_pts, hit_cells = rep[inside], cand[inside]
        if hit_pts.size:
            # lowest candidate per point
            order = np.lexsort((hit_cells, hit_pts))
            hp, hc = hit_pts[order], hit_cells[order]
            firsts = np.r_[True, hp[1:] != hp[:-1]]
            out[hp[firsts]] = hc[firsts]
    # walk for points not adjacent to their nearest vertices
    for k in np.flatnonzero(out < 0):
        out[k] = _walk(mesh, pts[k], int(mesh.cells_around(int(nearest[k, 0]))[0]), tol)
    # tie-break: any cell containing p shares a vertex with the cell found
    found = np.flatnonzero(out >= 0)
    if found.size:
        lam = barycentric(mesh, out[found], pts[found])
        on_boundary = np.any(lam <= tol, axis=1)
        for k in found[on_boundary]:
            cand = _cell_neighbours_by_vertex(mesh, int(out[k]))
            inside = point_in_cells(mesh, cand, np.repeat(pts[k:k + 1], len(cand), 0), tol)
            out[k] = cand[inside].min()
    return out


def _walk(mesh: Mesh, p, start: int, tol) -> int:
    """Barycentric walk from ``start``; falls back to a brute-force scan."""
    c = start
    neighbours = mesh.edge_cells
    for _ in range(4 * mesh.n_cells + 10):
        lam = barycentric(mesh, c, p)
        k = int(np.argmin(lam))
        if lam[k] >= -tol:
            return c
        e = mesh.cell_edges[c, k]
        a, b = neighbours[e]
        nxt = b if a == c else a
        if nxt < 0:
            break
        c = int(nxt)
    inside = point_in_cells(mesh, np.arange(mesh.n_cells),
                            np.repeat(np.atleast_2d(p), mesh.n_cells, 0), tol)
    hits = np.flatnonzero(inside)
    return int(hits[0]) if hits.size else -1


def locate_point(mesh: Mesh, p) -> int | None:
    """Cell whose closed triangle contains ``p`` (lowest id on ties), else ``None``."""
    c = int(locate_points(mesh, np.asarray(p, dtype=float)[None, :])[0])
    return None if c < 0 else c


def _in_sector(e1, e2, d, tol=1e-12):
    c1 = e1[..., 0] * d[..., 1] - e1[..., 1] * d[..., 0]
    c2 = d[..., 0] * e2[..., 1] - d[..., 1] * e2[..., 0]
    s1 = tol * np.hypot(*np.moveaxis(e1, -1, 0)) * np.hypot(*np.moveaxis(d, -1, 0))
    s2 = tol * np.hypot(*np.moveaxis(e2, -1, 0)) * np.hypot(*np.moveaxis(d, -1, 0))
    return (c1 >= -s1) & (c2 >= -s2)


def ray_first_cells(mesh: Mesh, nodes, directions) -> np.ndarray:
    """Vectorised :func:`ray_first_cell`; ``-1`` where the ray leaves the domain."""
    nodes = np.asarray(nodes, dtype=np.int64)
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    out = np.full(len(nodes), -1, dtype=np.int64)
    if len(nodes) == 0:
        return out
    offsets, ids = mesh.vertex_cells
    counts = offsets[nodes + 1] - offsets[nodes]
    rep = np.repeat(np.arange(len(nodes)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cand = ids[np.repeat(offsets[nodes], counts) + local]
    tri = mesh.cells[cand]
    i = nodes[rep]
    k = np.argmax(tri == i[:, None], axis=1)
    nxt = tri[np.arange(len(tri)), (k + 1) % 3]
    prv = tri[np.arange(len(tri)), (k + 2) % 3]
    x = mesh.vertices
    e1 = x[nxt] - x[i]
    e2 = x[prv] - x[i]
    hit = _in_sector(e1, e2, directions[rep])
    hr, hc = rep[hit], cand[hit]
    order = np.lexsort((hc, hr))
    hr, hc = hr[order], hc[order]
    firsts = np.r_[True, hr[1:] != hr[:-1]] if hr.size else np.zeros(0, bool)
    out[hr[firsts]] = hc[firsts]
    return out


def ray_first_cell(mesh: Mesh, i: int, direction) -> int | None:
    """Cell incident to vertex ``i`` whose angular sector contains ``direction``."""
    d = np.asarray(direction, dtype=float)
    if not np.any(d):
        raise ValueError("direction must be non-zero")
    c = int(ray_first_cells(mesh, [i], d[None, :])[0])
    return None if c < 0 else c


def hanging_vertices(mesh: Mesh) -> list[tuple[int, int]]:
    """Pairs (vertex, edge) where a vertex lies in the relative interior of an edge."""
    x = mesh.vertices
    tree = _locator(mesh).tree
    a, b = x[mesh.edges[:, 0]], x[mesh.edges[:, 1]]
    mids = 0.5 * (a + b)
    found = []
    for e, near in enumerate(tree.query_ball_point(mids, 0.5 * mesh.edge_lengths * (1 + 1e-9))):
        va, vb = mesh.edges[e]
        t = b[e] - a[e]
        L2 = t @ t
        for v in near:
            if v == va or v == vb:
                continue
            d = x[v] - a[e]
            s = (d @ t) / L2
            dist = abs(d[0] * t[1] - d[1] * t[0]) / np.sqrt(L2)
            if 1e-12 < s < 1 - 1e-12 and dist <= 1e-10 * np.sqrt(L2):
                found.append((int(v), int(e)))
    return found


def check_invariants(mesh: Mesh) -> list[str]:
    """Return a list of violated mesh invariants (empty when valid)."""
    problems = []
    g = mesh.geometry
    if np.any(g.area <= 0):
        problems.append("non-positive cell area")
    if not np.allclose(g.angles.sum(axis=1), np.pi, atol=1e-12, rtol=0):
        problems.append("angle sums differ from pi")
    if np.any(g.rho > g.h):
        problems.append("inscribed diameter exceeds cell diameter")
    tags = mesh.edge_tags
    boundary = mesh.edge_cells[:, 1] < 0
    if np.any(tags[boundary] == INTERIOR):
        problems.append("untagged boundary edge")
    if np.any(tags[~boundary] != INTERIOR):
        problems.append("tagged interior edge")
    hanging = hanging_vertices(mesh)
    if hanging:
        problems.append(f"{len(hanging)} hanging node(s), first vertex {hanging[0][0]}")
    return problems


def write_mesh(mesh: Mesh, prefix) -> list[Path]:
    """Write ``prefix.node``, ``prefix.ele`` and ``prefix.edge`` text files.

    Node lines are ``id x y [tag]`` with ``tag`` in ``D``/``N`` for boundary
    vertices; the edge file keeps per-edge tags so corner cases round-trip.
    """
    prefix = Path(prefix)
    node_tag = {}
    for e in mesh.boundary_edges:
        for v in mesh.edges[e]:
            # a vertex touching any Dirichlet edge is a Dirichlet vertex
            node_tag[int(v)] = min(node_tag.get(int(v), NEUMANN), int(mesh.edge_tags[e]))
    lines = []
    for i, (x, y) in enumerate(mesh.vertices):
        row = f"{i} {float(x)!r} {float(y)!r}"
        if i in node_tag:
            row += f" {_TAG_NAMES[node_tag[i]]}"
        lines.append(row)
    paths = [prefix.with_suffix(".node"), prefix.with_suffix(".ele"), prefix.with_suffix(".edge")]
    paths[0].write_text("\n".join(lines) + "\n")
    paths[1].write_text("".join(f"{k} {a} {b} {c}\n" for k, (a, b, c) in enumerate(mesh.cells)))
    paths[2].write_text("".join(
        f"{k} {mesh.edges[e, 0]} {mesh.edges[e, 1]} {_TAG_NAMES[int(mesh.edge_tags[e])]}\n"
        for k, e in enumerate(mesh.boundary_edges)))
    return paths


def read_mesh(prefix) -> Mesh:
    """Load a mesh written by :func:`write_mesh`.

    Without an ``.edge`` file, a boundary edge is Neumann if either endpoint
    carries an ``N`` tag and Dirichlet otherwise.
    """
    prefix = Path(prefix)
    ids, pts, ntags = [], [], {}
    for line in prefix.with_suffix(".node").read_text().split("\n"):
        parts = line.split()
        if not parts:
            continue
        ids.append(int(parts[0]))
        pts.append((float(parts[1]), float(parts[2])))
        if len(parts) > 3:
            ntags[int(parts[0])] = parts[3]
    if ids != list(range(len(ids))):
        raise MeshError("node ids must be 0-based and consecutive")
    tri = []
    for line in prefix.with_suffix(".ele").read_text().split("\n"):
        parts = line.split()
        if parts:
            tri.append([int(v) for v in parts[1:4]])
    edge_file = prefix.with_suffix(".edge")
    if edge_file.exists():
        spec = {}
        for line in edge_file.read_text().split("\n"):
            parts = line.split()
            if parts:
                spec[(int(parts[1]), int(parts[2]))] = parts[3]
    else:
        def spec_fn(a, b):
            if ntags.get(a) == "N" or ntags.get(b) == "N":
                return "N"
            return "D" if a in ntags and b in ntags else None
        points = np.array(pts)
        tri_arr = np.array(tri)
        pairs = np.sort(tri_arr[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
        edges, counts = np.unique(pairs, axis=0, return_counts=True)
        spec = {}
        for a, b in edges[counts == 1]:
            tag = spec_fn(int(a), int(b))
            if tag is not None:
                spec[(int(a), int(b))] = tag
        return build_mesh(points, tri_arr, spec)
    return build_mesh(np.array(pts), np.array(tri), spec)

