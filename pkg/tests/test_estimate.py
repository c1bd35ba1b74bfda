import numpy as np
import pytest
from dataclasses import replace

from afcadapt.estimate import (EDGE_CONSTANT_FACTOR, EstimatorConstants, EstimatorError,
                               assemble_estimate, edge_constant, edge_normals,
                               element_residual_norms_sq, energy_norm_error,
                               face_residual_norms_sq, tangential_terms)
from afcadapt.mesh import build_mesh, cell_geometry
from afcadapt.nlsolve import solve_problem
from afcadapt.problems import get_case
from afcadapt.refine import refine_uniform
from afcadapt.space import DofMap, ProblemDefinition, interpolate

from conftest import refined_grid


def affine_problem(sigma=1.0, eps=0.05, neumann=None):
    # u = 1 + 2x - y solves -eps lap u + (1, 1).grad u + u = f with f below
    return ProblemDefinition(
        eps, lambda x, y, u: (np.ones_like(x), np.ones_like(x)),
        lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        lambda x, y: 1.0 + (1 + 2 * x - y), sigma, lambda x, y: 1 + 2 * x - y,
        neumann=neumann, exact=lambda x, y: 1 + 2 * x - y,
        exact_gradient=lambda x, y: (2 + 0 * x, -1 + 0 * x))


def test_edge_constant_right_isosceles():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    geo = cell_geometry(pts, np.array([[0, 1, 2]]))
    rho = 2 * 0.5 / ((2 + np.sqrt(2)) / 2)  # inscribed diameter = 2 area / semi-perimeter
    expected = EDGE_CONSTANT_FACTOR * 0.5 / (1 - np.cos(np.pi / 4) * rho ** 3)
    assert edge_constant(geo)[0] == pytest.approx(expected, rel=1e-14)
    assert EDGE_CONSTANT_FACTOR == pytest.approx(4 * np.sqrt(2) * (1 + np.sqrt(2)))


def test_edge_constant_rejects_invalid_denominator():
    from afcadapt.mesh import CellGeometry
    geo = CellGeometry(area=np.array([1.0]), h=np.array([1.0]), rho=np.array([1.2]),
                       angles=np.array([[0.1, 0.2, np.pi - 0.3]]), grad_basis=None)
    with pytest.raises(EstimatorError, match="cell 0"):
        edge_constant(geo)


def test_residuals_vanish_for_affine_solution():
    mesh = refined_grid("3", rounds=2, seed=1)
    prob = affine_problem()
    u = interpolate(mesh, prob.exact)
    assert element_residual_norms_sq(mesh, prob, u).max() < 1e-26
    assert face_residual_norms_sq(mesh, prob, u).max() < 1e-26
    err = energy_norm_error(mesh, prob, u)
    assert err.l2 < 1e-14 and err.h1 < 1e-13


def test_neumann_face_residual_uses_the_flux_defect():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    mesh = build_mesh(pts, [(0, 1, 2), (0, 2, 3)],
                      lambda x, y: "N" if abs(x - 1) < 1e-12 else "D")
    eps = 0.05
    prob = affine_problem(eps=eps, neumann=lambda x, y: 0.0 * x)
    u = interpolate(mesh, prob.exact)
    r = face_residual_norms_sq(mesh, prob, u)
    right = mesh.edge_index(1, 2)
    # g - eps du/dn = -2 eps on an edge of length 1
    assert r[right] == pytest.approx((2 * eps) ** 2)
    others = np.delete(np.arange(mesh.n_edges), right)
    assert np.all(r[others] < 1e-28)


def test_edge_normals_are_unit_and_outward_from_first_cell():
    mesh = refined_grid("2", rounds=2, seed=2)
    n = edge_normals(mesh)
    assert np.allclose(np.hypot(*n.T), 1.0)
    mid = mesh.vertices[mesh.edges].mean(axis=1)
    out = mid - mesh.barycenters[mesh.edge_cells[:, 0]]
    assert np.all(np.einsum("ed,ed->e", n, out) > 0)


def test_tangential_term():
    mesh = refined_grid("1", rounds=1, seed=0)
    u = interpolate(mesh, lambda x, y: 3 * x)
    t = tangential_terms(mesh, u)
    d = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    assert t == pytest.approx((3 * d[:, 0]) ** 2 / mesh.edge_lengths ** 2)


def _solved(method="bjk", levels=2, case_name="boundary_layer"):
    case = get_case(case_name)
    mesh = case.root_mesh("1")
    for _ in range(levels):
        mesh = refine_uniform(mesh)
    dofs = DofMap(mesh)
    return case, mesh, dofs, solve_problem(mesh, dofs, case.problem, method)


def test_cell_indicators_sum_to_the_global_estimate():
    case, mesh, dofs, res = _solved()
    est = assemble_estimate(mesh, dofs, case.problem, res.u, res.limiter)
    assert est.cell_indicator_sq.sum() == pytest.approx(est.eta ** 2, rel=1e-12)
    assert est.eta ** 2 == pytest.approx(est.eta1 ** 2 + est.eta2 ** 2 + est.eta3 ** 2)


def test_stabilization_term_vanishes_without_stabilization():
    case, mesh, dofs, res = _solved("none")
    est = assemble_estimate(mesh, dofs, case.problem, res.u, res.limiter)
    assert est.eta3 == 0.0
    est2 = assemble_estimate(mesh, dofs, case.problem, res.u, None)
    assert est2.eta == est.eta


def test_sigma_zero_takes_epsilon_branch():
    case, mesh, dofs, res = _solved()
    prob0 = replace(case.problem, sigma=0.0)
    est = assemble_estimate(mesh, dofs, prob0, res.u, res.limiter)
    eps = prob0.epsilon
    w1 = 4 * mesh.geometry.h ** 2 / eps
    assert est.eta1_sq == pytest.approx(w1 * element_residual_norms_sq(mesh, prob0, res.u))
    w2 = 4 * mesh.edge_lengths / eps
    assert est.eta2_sq == pytest.approx(w2 * face_residual_norms_sq(mesh, prob0, res.u))


def test_positive_sigma_takes_the_smaller_weight():
    case, mesh, dofs, res = _solved()
    prob = case.problem
    est = assemble_estimate(mesh, dofs, prob, res.u, res.limiter)
    w1 = np.minimum(4 * mesh.geometry.h ** 2 / prob.epsilon, 4 / prob.sigma)
    assert est.eta1_sq == pytest.approx(w1 * element_residual_norms_sq(mesh, prob, res.u))


def test_estimate_bounds_the_error_from_above():
    for method in ("bjk", "muas", "none"):
        case, mesh, dofs, res = _solved(method, levels=3)
        est = assemble_estimate(mesh, dofs, case.problem, res.u, res.limiter)
        err = energy_norm_error(mesh, case.problem, res.u)
        assert est.eta >= err.energy


def test_constants_scale_kappa():
    c = EstimatorConstants(C_I=1.0, C=2.0, C_inv=3.0)
    k1, k2 = c.kappa(np.array([1.0]))
    assert k1[0] == pytest.approx(2.0 * 5.0) and k2[0] == pytest.approx(9 * 10.0)


def test_mismatched_limiter_output_is_rejected():
    case, mesh, dofs, res = _solved()
    bad = replace(res.limiter, edge_weight=res.limiter.edge_weight[:-1])
    with pytest.raises(EstimatorError):
        assemble_estimate(mesh, dofs, case.problem, res.u, bad)
