"""Benchmark problems, their root grids, and cutline sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import Delaunay
from scipy.special import expit

from .mesh import Mesh, build_mesh
from .refine import Circle
from .space import ProblemDefinition, evaluate_fe_points

GRID_IDS = ("1", "2", "3", "4", "hemker")


@dataclass(frozen=True)
class BenchmarkCase:
    """A benchmark problem together with its geometry and quantities of interest.

    ``boundary_spec(x, y)`` returns ``"D"`` or ``"N"`` for a boundary edge
    midpoint.  ``cutlines`` maps a name to the segment end points.
    """

    name: str
    problem: ProblemDefinition
    grids: tuple
    boundary_spec: Callable
    curve: Optional[Circle] = None
    cutlines: dict = field(default_factory=dict)
    smear_cutline: Optional[str] = None

    @property
    def has_exact(self) -> bool:
        return self.problem.exact is not None

    def root_mesh(self, grid) -> Mesh:
        grid = str(grid)
        if grid not in self.grids:
            raise ValueError(f"case {self.name!r} is defined on grids {self.grids}, not {grid!r}")
        return make_root_grid(grid, self.boundary_spec)


def _all_dirichlet(x, y):
    return "D"


def _zero(x, y):
    return np.zeros_like(np.asarray(x, dtype=float))


def _const(value):
    def fn(x, y, *rest):
        return np.full(np.shape(x), float(value))
    return fn


# ---------------------------------------------------------------------------
# boundary layer problem on the unit square

def case_boundary_layer(epsilon: float = 1e-2) -> BenchmarkCase:
    eps = float(epsilon)

    def parts(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return x, y, np.exp(2 * (x - 1) / eps), np.exp(3 * (y - 1) / eps)

    def exact(x, y):
        x, y, e1, e2 = parts(x, y)
        return x * y**2 - y**2 * e1 - x * e2 + e1 * e2

    def gradient(x, y):
        x, y, e1, e2 = parts(x, y)
        ux = y**2 - y**2 * (2 / eps) * e1 - e2 + (2 / eps) * e1 * e2
        uy = 2 * x * y - 2 * y * e1 - x * (3 / eps) * e2 + (3 / eps) * e1 * e2
        return ux, uy

    def source(x, y):
        xx, yy, e1, e2 = parts(x, y)
        ux, uy = gradient(x, y)
        uxx = -yy**2 * (4 / eps**2) * e1 + (4 / eps**2) * e1 * e2
        uyy = 2 * xx - 2 * e1 - xx * (9 / eps**2) * e2 + (9 / eps**2) * e1 * e2
        return -eps * (uxx + uyy) + 2 * ux + 3 * uy + exact(x, y)

    problem = ProblemDefinition(
        epsilon=eps, convection=lambda x, y, u: (2.0, 3.0), reaction=_const(1.0),
        source=source, sigma=1.0, dirichlet=exact, exact=exact, exact_gradient=gradient,
        name="boundary_layer")
    return BenchmarkCase("boundary_layer", problem, ("1", "2", "3"), _all_dirichlet)


# ---------------------------------------------------------------------------
# corner singularity on the L-shaped domain

def case_corner_singularity(epsilon: float = 1e-6) -> BenchmarkCase:
    def source(x, y):
        r = np.hypot(np.asarray(x) - 0.5, np.asarray(y) - 0.5)
        return 100.0 * r * (r - 0.5) * (r - np.sqrt(2.0) / 2.0)

    problem = ProblemDefinition(
        epsilon=float(epsilon), convection=lambda x, y, u: (3.0, 1.0), reaction=_const(1.0),
        source=source, sigma=1.0, dirichlet=_zero, name="corner_singularity")
    return BenchmarkCase("corner_singularity", problem, ("4",), _all_dirichlet)


# ---------------------------------------------------------------------------
# convection-, reaction- and diffusion-dominated regions

R0 = 17.0 / 8.0
RD = np.sqrt(1217.0) / 16.0 - R0


def _regime_radius(x, y):
    return np.hypot(np.asarray(x, dtype=float) - 1.0, np.asarray(y, dtype=float) + 27.0 / 16.0)


def regime_psi(r):
    r = np.asarray(r, dtype=float)
    outer = np.exp(-1000.0 * (r - (R0 + RD)) ** 2) / (R0 + RD)
    inner = np.exp(-1000.0 * (r - (R0 - RD)) ** 2) / (R0 - RD)
    band = np.abs(r - R0) <= RD
    return np.where(band, 1.0 / np.where(band, r, 1.0), np.where(r > R0 + RD, outer, inner))


def regime_reaction(x, y):
    r = _regime_radius(x, y)
    outer = np.exp(-100.0 * (r - (R0 + RD)) ** 2)
    inner = np.exp(-100.0 * (r - (R0 - RD)) ** 2)
    return np.where(np.abs(r - R0) <= RD, 1.0, np.where(r > R0 + RD, outer, inner))


def case_multi_regime(epsilon: float = 1e-6) -> BenchmarkCase:
    def convection(x, y, u):
        r = _regime_radius(x, y)
        s = r * regime_psi(r)
        return s * (np.asarray(y) + 27.0 / 16.0), s * (1.0 - np.asarray(x))

    def dirichlet(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        tol = 1e-12
        top = y >= 1.0 - tol
        inlet = (x <= tol) & (y >= 0.125 - tol) & (y <= 0.25 + tol) & (y > tol)
        return np.where(top | inlet, 1.0, 0.0)

    def spec(x, y):
        return "N" if abs(x - 1.0) < 1e-12 else "D"

    problem = ProblemDefinition(
        epsilon=float(epsilon), convection=convection, reaction=regime_reaction,
        source=_const(0.0), sigma=0.0, dirichlet=dirichlet, neumann=_const(0.0),
        name="multi_regime")
    lines = {"x=0.5": ((0.5, 0.0), (0.5, 1.0)), "x=1": ((1.0, 0.0), (1.0, 1.0)),
             "x=y": ((0.0, 0.0), (1.0, 1.0)), "x=1-y": ((0.0, 1.0), (1.0, 0.0))}
    return BenchmarkCase("multi_regime", problem, ("1", "2", "3"), spec, cutlines=lines)


# ---------------------------------------------------------------------------
# flow around a cylinder

HEMKER_BOX = (-3.0, 9.0, -3.0, 3.0)
HEMKER_SMEAR_REFERENCE = 0.0723


def case_hemker(epsilon: float = 1e-4) -> BenchmarkCase:
    def dirichlet(x, y):
        x = np.asarray(x, dtype=float)
        return np.where(x <= -3.0 + 1e-12, 0.0, 1.0)

    def spec(x, y):
        if abs(x + 3.0) < 1e-12 or np.hypot(x, y) < 1.5:
            return "D"
        return "N"

    problem = ProblemDefinition(
        epsilon=float(epsilon), convection=lambda x, y, u: (1.0, 0.0), reaction=_const(0.0),
        source=_const(0.0), sigma=0.0, dirichlet=dirichlet, neumann=_const(0.0),
        name="hemker")
    return BenchmarkCase("hemker", problem, ("hemker",), spec, curve=Circle((0.0, 0.0), 1.0),
                         cutlines={"x=4": ((4.0, -3.0), (4.0, 3.0))}, smear_cutline="x=4")


# ---------------------------------------------------------------------------
# nonlinear convection with an interior layer

def case_nonlinear(epsilon: float = 1e-3, sigma: float = 0.0) -> BenchmarkCase:
    eps = float(epsilon)

    def logistic(x, y):
        s = (-4.0 * np.asarray(x, dtype=float) + 4.0 * np.asarray(y, dtype=float) - 1.0) \
            / (32.0 * eps)
        return expit(-s)

    def exact(x, y):
        return 0.75 - 0.25 * logistic(x, y)

    def gradient(x, y):
        p = logistic(x, y)
        du_ds = 0.25 * p * (1.0 - p)
        return -du_ds / (8.0 * eps), du_ds / (8.0 * eps)

    def source(x, y):
        p = logistic(x, y)
        d2u_ds2 = -0.25 * p * (1.0 - p) * (1.0 - 2.0 * p)
        # u_x + u_y vanishes, so only the diffusion term remains
        return -d2u_ds2 / (32.0 * eps)

    problem = ProblemDefinition(
        epsilon=eps, convection=lambda x, y, u: (u, u), reaction=_const(0.0), source=source,
        sigma=float(sigma), dirichlet=exact, exact=exact, exact_gradient=gradient,
        is_nonlinear=True, name="nonlinear")
    return BenchmarkCase("nonlinear", problem, ("1", "2", "3"), _all_dirichlet)


CASES = {
    "boundary_layer": case_boundary_layer,
    "corner_singularity": case_corner_singularity,
    "multi_regime": case_multi_regime,
    "hemker": case_hemker,
    "nonlinear": case_nonlinear,
}


def get_case(name: str, epsilon: float | None = None) -> BenchmarkCase:
    try:
        ctor = CASES[name]
    except KeyError:
        raise ValueError(f"unknown case {name!r}; valid cases: {', '.join(CASES)}") from None
    return ctor() if epsilon is None else ctor(epsilon=epsilon)


# ---------------------------------------------------------------------------
# root grids

def _square_grid(xs, ys, diagonal):
    nx, ny = len(xs), len(ys)
    pts = np.array([(x, y) for y in ys for x in xs], dtype=float)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx + 1, a + nx  # bl, br, tr, tl
            if diagonal == "NE":
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return pts, tris


def _criss_cross(n=2):
    xs = np.linspace(0.0, 1.0, n + 1)
    pts = [(x, y) for y in xs for x in xs]
    tris = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 2, a + n + 1
            m = len(pts)
            pts.append(((xs[i] + xs[i + 1]) / 2, (xs[j] + xs[j + 1]) / 2))
            tris += [(a, b, m), (b, c, m), (c, d, m), (d, a, m)]
    return np.array(pts), tris


def _l_shape():
    pts = np.array([(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5), (1.0, 0.5),
                    (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)])
    squares = [(0, 1, 3, 2), (2, 3, 6, 5), (3, 4, 7, 6)]  # bl, br, tr, tl
    tris = []
    for a, b, c, d in squares:
        tris += [(a, b, c), (a, c, d)]
    return pts, tris


def hemker_points():
    """Vertices of the Hemker root mesh: unit grid, a ring, and the polygonal circle."""
    x0, x1, y0, y1 = HEMKER_BOX
    grid = np.array([(x, y) for y in np.arange(y0, y1 + 0.5) for x in np.arange(x0, x1 + 0.5)])
    inner = (np.abs(grid[:, 0]) < 2 - 1e-12) & (np.abs(grid[:, 1]) < 2 - 1e-12)
    grid = grid[~inner]
    t = 2 * np.pi * np.arange(16) / 16
    circle = np.stack([np.cos(t), np.sin(t)], axis=1)
    ring = 1.5 * np.stack([np.cos(t + np.pi / 16), np.sin(t + np.pi / 16)], axis=1)
    return np.concatenate([circle, ring, grid])


def _hemker():
    pts = hemker_points()
    tri = Delaunay(pts).simplices
    centroid = pts[tri].mean(axis=1)
    keep = np.hypot(centroid[:, 0], centroid[:, 1]) > 1.0
    return pts, tri[keep]


def make_root_grid(grid_id, boundary_spec=_all_dirichlet) -> Mesh:
    """Level-0 mesh for grid ``1``-``4`` or ``hemker``."""
    gid = str(grid_id)
    half = np.linspace(0.0, 1.0, 3)
    if gid == "1":
        pts, tris = _square_grid(half, half, "NE")
    elif gid == "2":
        pts, tris = _square_grid(half, half, "NW")
    elif gid == "3":
        pts, tris = _criss_cross()
    elif gid == "4":
        pts, tris = _l_shape()
    elif gid == "hemker":
        pts, tris = _hemker()
    else:
        raise ValueError(f"unknown grid {grid_id!r}; valid grids: {', '.join(GRID_IDS)}")
    return build_mesh(pts, tris, boundary_spec)


def cutline_sample(mesh: Mesh, u, line, n_intervals: int = 100_000) -> np.ndarray:
    """Sample the P1 function along a segment.

    Returns an array of rows ``(s, value)`` where ``s`` is the distance from
    the first end point; points outside the domain are skipped.
    """
    p0, p1 = (np.asarray(p, dtype=float) for p in line)
    t = np.linspace(0.0, 1.0, int(n_intervals) + 1)
    pts = p0 + t[:, None] * (p1 - p0)
    vals = evaluate_fe_points(mesh, u, pts)
    s = t * np.hypot(*(p1 - p0))
    ok = ~np.isnan(vals)
    return np.stack([s[ok], vals[ok]], axis=1)
