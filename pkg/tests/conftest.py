import os

import numpy as np
import pytest

from afcadapt.problems import make_root_grid
from afcadapt.refine import refine_red_green

ACCEPTANCE_RESULTS = []


def refined_grid(grid_id="1", rounds=2, seed=0, fraction=0.3):
    """Root grid followed by ``rounds`` of random red-green refinement."""
    rng = np.random.default_rng(seed)
    mesh = make_root_grid(grid_id)
    for _ in range(rounds):
        k = max(1, int(fraction * mesh.n_cells))
        mesh = refine_red_green(mesh, rng.choice(mesh.n_cells, size=k, replace=False))
    return mesh


def record_acceptance(number, passed, detail=""):
    """Store a verdict; ``passed=None`` marks a criterion that was not run."""
    ACCEPTANCE_RESULTS.append((number, None if passed is None else bool(passed), detail))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("AFC_RUN_HEMKER") == "1":
        return
    skip = pytest.mark.skip(reason="set AFC_RUN_HEMKER=1 to run the Hemker benchmark")
    for item in items:
        if item.get_closest_marker("hemker") is not None:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")


def random_system(seed, max_nodes=60):
    """Random convection-diffusion-reaction matrix on a small refined mesh.

    Returns ``(mesh, dofs, A, u)``; about a third of the meshes carry
    Neumann edges and a third of the vectors repeat values so that ties occur.
    """
    from afcadapt.mesh import build_mesh
    from afcadapt.space import DofMap, ProblemDefinition, assemble_galerkin

    rng = np.random.default_rng(seed)
    grid = str(rng.choice(["1", "2", "3", "4"]))
    mesh = refined_grid(grid, rounds=int(rng.integers(0, 3)), seed=int(rng.integers(1 << 30)),
                        fraction=0.25)
    while mesh.n_vertices > max_nodes:
        mesh = refined_grid(grid, rounds=1, seed=int(rng.integers(1 << 30)), fraction=0.25)
    if rng.random() < 1 / 3:
        mesh = build_mesh(mesh.vertices, mesh.cells,
                          lambda x, y: "N" if x > 1 - 1e-12 or y > 1 - 1e-12 else "D")
    eps = 10.0 ** rng.uniform(-4, 0)
    bx, by, sx, sy = rng.normal(size=4)
    c0 = rng.uniform(0, 2)
    prob = ProblemDefinition(
        eps, lambda x, y, u: (bx + sx * y, by - sy * x),
        lambda x, y: c0 + 0 * x, lambda x, y: 0 * x, 1.0, lambda x, y: 0 * x)
    dofs = DofMap(mesh)
    A, _ = assemble_galerkin(mesh, dofs, prob)
    if rng.random() < 1 / 3:
        u = rng.integers(0, 4, size=mesh.n_vertices) / 3.0
    else:
        u = rng.normal(size=mesh.n_vertices)
    return mesh, dofs, A, u
