"""Red-green refinement with green closures unwound before every pass.

Each call to :func:`refine_red_green` works on the *red level* of the mesh:
green closure pairs are replaced by their red parents, marked cells are
split into four congruent children, cells with more than one hanging edge
(or a doubly split edge) are red-refined too, and the remaining cells with
a single hanging edge are bisected towards the hanging node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import GREEN, RED, ROOT, LOCAL_EDGES, Mesh, MeshError

_KEY_SHIFT = np.int64(1) << np.int64(32)


def _keys(a, b):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * _KEY_SHIFT + hi


@dataclass(frozen=True)
class Circle:
    """Curved boundary piece: the circle of ``radius`` around ``center``."""

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    tol: float = 1e-9

    def on_curve(self, points) -> np.ndarray:
        d = np.atleast_2d(points) - np.asarray(self.center)
        return np.abs(np.hypot(d[:, 0], d[:, 1]) - self.radius) <= self.tol * self.radius

    def project(self, points) -> np.ndarray:
        c = np.asarray(self.center)
        d = np.atleast_2d(points) - c
        r = np.hypot(d[:, 0], d[:, 1])
        if np.any(r <= 1e-14 * self.radius):
            raise MeshError("cannot project a point sitting at the circle center")
        return c + self.radius * d / r[:, None]


class _Midpoints:
    """Growing vertex table with edge -> midpoint lookup."""

    def __init__(self, mesh: Mesh):
        self.coords = [mesh.vertices]
        self.parents = [mesh.vertex_parents]
        self.n = mesh.n_vertices
        vp = mesh.vertex_parents
        has = np.flatnonzero(vp[:, 0] >= 0)
        keys = _keys(vp[has, 0], vp[has, 1])
        order = np.argsort(keys)
        self.keys = keys[order]
        self.ids = has[order]
        self._x = mesh.vertices

    def lookup(self, keys):
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else np.zeros_like(keys)
        if len(self.keys) == 0:
            return np.full(len(keys), -1, dtype=np.int64)
        found = self.keys[pos] == keys
        return np.where(found, self.ids[pos], -1)

    def get_or_create(self, a, b):
        keys = _keys(a, b)
        ids = self.lookup(keys)
        missing = ids < 0
        if np.any(missing):
            new_keys, first = np.unique(keys[missing], return_index=True)
            lo = new_keys // _KEY_SHIFT
            hi = new_keys % _KEY_SHIFT
            x = self.vertices
            new_ids = np.arange(self.n, self.n + len(new_keys))
            self.coords.append(0.5 * (x[lo] + x[hi]))
            self.parents.append(np.stack([lo, hi], axis=1))
            self.n += len(new_keys)
            self._x = None
            merged = np.concatenate([self.keys, new_keys])
            merged_ids = np.concatenate([self.ids, new_ids])
            order = np.argsort(merged, kind="stable")
            self.keys, self.ids = merged[order], merged_ids[order]
            ids = self.lookup(keys)
        return ids

    @property
    def vertices(self):
        if self._x is None:
            self._x = np.concatenate(self.coords)
            self.coords = [self._x]
        return self._x

    @property
    def vertex_parents(self):
        return np.concatenate(self.parents)


def _red_children(cells, mids):
    """Four children per cell given midpoints of edges (bc, ca, ab)."""
    a, b, c = cells[:, 0], cells[:, 1], cells[:, 2]
    m_bc, m_ca, m_ab = mids[:, 0], mids[:, 1], mids[:, 2]
    kids = np.stack([
        np.stack([a, m_ab, m_ca], axis=1),
        np.stack([m_ab, b, m_bc], axis=1),
        np.stack([m_ca, m_bc, c], axis=1),
        np.stack([m_ab, m_bc, m_ca], axis=1),
    ], axis=1)
    return kids.reshape(-1, 3)


def _hanging_state(cells, table: _Midpoints):
    """Per cell: midpoint ids of its three edges and whether a half is split again."""
    ea = cells[:, LOCAL_EDGES[:, 0]]
    eb = cells[:, LOCAL_EDGES[:, 1]]
    mids = table.lookup(_keys(ea, eb).ravel()).reshape(-1, 3)
    has = mids >= 0
    double = np.zeros_like(has)
    if np.any(has):
        r, k = np.nonzero(has)
        m = mids[r, k]
        d1 = table.lookup(_keys(ea[r, k], m)) >= 0
        d2 = table.lookup(_keys(m, eb[r, k])) >= 0
        double[r, k] = d1 | d2
    return mids, has, double


def refine_red_green(mesh: Mesh, marked, curve: Circle | None = None) -> Mesh:
    """Refine the cells in ``marked`` and close the mesh with green bisections.

    Green cells are never refined further: a marked green cell marks its red
    parent, all green pairs are removed, marked red cells are split into four,
    and closure is recomputed from scratch.  New midpoints on edges lying on
    ``curve`` are projected onto it.
    """
    marked_idx = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray)
                                      else marked, dtype=np.int64))
    if marked_idx.size and (marked_idx[0] < 0 or marked_idx[-1] >= mesh.n_cells):
        raise IndexError("marked cell id out of range")
    mark_cell = np.zeros(mesh.n_cells, dtype=bool)
    mark_cell[marked_idx] = True

    green = mesh.cell_origin == GREEN
    keep = ~green
    red_cells = mesh.cells[keep]
    red_gen = mesh.cell_generation[keep]
    red_origin = mesh.cell_origin[keep]
    red_mark = mark_cell[keep]

    if np.any(green):
        gp = mesh.green_parent[green]
        gkey = np.sort(gp, axis=1)
        _, first, inv = np.unique(gkey, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        parents = gp[first]
        pgen = mesh.cell_generation[green][first]
        porigin = np.where(pgen == 0, ROOT, RED).astype(np.int8)
        pmark = np.zeros(len(parents), dtype=bool)
        np.logical_or.at(pmark, inv, mark_cell[green])
        red_cells = np.concatenate([red_cells, parents])
        red_gen = np.concatenate([red_gen, pgen])
        red_origin = np.concatenate([red_origin, porigin])
        red_mark = np.concatenate([red_mark, pmark])

    table = _Midpoints(mesh)
    cells, gen, origin, todo = red_cells, red_gen, red_origin, red_mark
    while np.any(todo):
        sel = cells[todo]
        ea = sel[:, LOCAL_EDGES[:, 0]].ravel()
        eb = sel[:, LOCAL_EDGES[:, 1]].ravel()
        mids = table.get_or_create(ea, eb).reshape(-1, 3)
        kids = _red_children(sel, mids)
        cells = np.concatenate([cells[~todo], kids])
        gen = np.concatenate([gen[~todo], np.repeat(gen[todo] + 1, 4)])
        origin = np.concatenate([origin[~todo], np.full(len(kids), RED, dtype=np.int8)])
        _, has, double = _hanging_state(cells, table)
        todo = (has.sum(axis=1) >= 2) | double.any(axis=1)

    mids, has, _ = _hanging_state(cells, table)
    one = has.any(axis=1)
    plain = ~one
    out_cells = [cells[plain]]
    out_gen = [gen[plain]]
    out_origin = [origin[plain]]
    out_parent = [np.full((int(plain.sum()), 3), -1, dtype=np.int64)]
    if np.any(one):
        gc = cells[one]
        k = np.argmax(has[one], axis=1)
        m = mids[one][np.arange(len(gc)), k]
        # rotate so the hanging edge is (v1, v2)
        rot = np.stack([k, (k + 1) % 3, (k + 2) % 3], axis=1)
        v = np.take_along_axis(gc, rot, axis=1)
        g1 = np.stack([v[:, 0], v[:, 1], m], axis=1)
        g2 = np.stack([v[:, 0], m, v[:, 2]], axis=1)
        out_cells.append(np.stack([g1, g2], axis=1).reshape(-1, 3))
        out_gen.append(np.repeat(gen[one], 2))
        out_origin.append(np.full(2 * len(gc), GREEN, dtype=np.int8))
        out_parent.append(np.repeat(gc, 2, axis=0))
    new_cells = np.concatenate(out_cells)
    vertices = table.vertices
    vparents = table.vertex_parents

    tags = _inherit_tags(mesh, new_cells, vparents)
    if curve is not None:
        vertices = _project(vertices, vparents, new_cells, curve)
    return Mesh(vertices, new_cells, tags, vertex_parents=vparents,
                cell_origin=np.concatenate(out_origin),
                cell_generation=np.concatenate(out_gen),
                green_parent=np.concatenate(out_parent))


def refine_uniform(mesh: Mesh, curve: Circle | None = None) -> Mesh:
    return refine_red_green(mesh, np.arange(mesh.n_cells), curve)


def _boundary_pairs(cells):
    pairs = np.sort(cells[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    return edges[counts == 1]


def _inherit_tags(old: Mesh, cells, vparents):
    old_tags = old.boundary_tag_dict()
    tags = {}
    for a, b in _boundary_pairs(cells):
        key = (int(a), int(b))
        probe = key
        while probe not in old_tags:
            hi, lo = probe[1], probe[0]
            pa, pb = vparents[hi]
            if pa < 0 or lo not in (pa, pb):
                raise MeshError(f"boundary edge {key} does not descend from a boundary edge")
            probe = (int(min(pa, pb)), int(max(pa, pb)))
        tags[key] = old_tags[probe]
    return tags


def _project(vertices, vparents, cells, curve: Circle):
    boundary = np.zeros(len(vertices), dtype=bool)
    boundary[_boundary_pairs(cells).ravel()] = True
    cand = np.flatnonzero(boundary & (vparents[:, 0] >= 0))
    out = None
    # parents precede children, so projecting in creation order sees final parents
    for v in cand:
        x = vertices if out is None else out
        pa, pb = vparents[v]
        if not (curve.on_curve(x[pa])[0] and curve.on_curve(x[pb])[0]):
            continue
        if curve.on_curve(x[v])[0]:
            continue
        if out is None:
            out = vertices.copy()
        out[v] = curve.project(0.5 * (out[pa] + out[pb]))[0]
    return vertices if out is None else out


def project_curved_boundary(mesh: Mesh, curve: Circle) -> Mesh:
    """Move midpoint vertices of boundary chords on ``curve`` onto the curve."""
    vertices = _project(mesh.vertices, mesh.vertex_parents, mesh.cells, curve)
    if vertices is mesh.vertices:
        return mesh
    return Mesh(vertices, mesh.cells, mesh.boundary_tag_dict(),
                vertex_parents=mesh.vertex_parents, cell_origin=mesh.cell_origin,
                cell_generation=mesh.cell_generation, green_parent=mesh.green_parent)
