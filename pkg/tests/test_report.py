import csv
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afcadapt.adapt import LevelRecord
from afcadapt.mesh import read_mesh
from afcadapt.problems import make_root_grid
from afcadapt.refine import refine_uniform
from afcadapt.report import (METRICS_HEADER, convergence_slope, osc_metric, read_metrics_csv,
                             read_vtk, smear_metric, write_metrics_csv, write_outputs)
from afcadapt.report import RunWriter


def test_smear_of_a_ramp():
    s = np.linspace(0.0, 1.0, 1001)
    assert smear_metric(np.stack([s, s], axis=1)) == pytest.approx(0.8)


def test_smear_of_a_step_is_one_spacing():
    s = np.linspace(0.0, 1.0, 101)
    # a jump between neighbouring samples crosses both thresholds at once
    v = (s > 0.4).astype(float)
    assert smear_metric(np.stack([s, v], axis=1)) == pytest.approx(0.0)
    # one intermediate sample inside the jump gives exactly one spacing
    v = np.where(s < 0.4, 0.0, np.where(s < 0.41, 0.5, 1.0))
    assert smear_metric(np.stack([s, v], axis=1)) == pytest.approx(0.01)


def test_smear_unreached_threshold_is_nan():
    s = np.linspace(0.0, 1.0, 11)
    assert math.isnan(smear_metric(np.stack([s, 0.5 * s], axis=1)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=50), st.floats(0.1, 0.5),
       st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_smear_is_monotone_in_upper_threshold(values, lo, hi1, hi2):
    s = np.arange(len(values), dtype=float)
    samples = np.stack([s, np.maximum.accumulate(values)], axis=1)
    a = smear_metric(samples, lo, min(hi1, hi2))
    b = smear_metric(samples, lo, max(hi1, hi2))
    if not math.isnan(b):
        assert b >= a


def test_osc_metric():
    assert osc_metric(np.full(4, 0.3)) == 0.0
    assert osc_metric([0.0, 0.25, 1.0]) == 1.0


def test_convergence_slope_examples():
    dofs = np.array([100, 200, 400, 800, 1600, 3200, 6400])
    rows = [{"dofs": d, "err": 5.0 / d} for d in dofs]
    assert convergence_slope(rows, "err") == pytest.approx(-1.0, abs=1e-9)
    rows = [{"dofs": d, "err": 0.7} for d in dofs]
    assert convergence_slope(rows, "err") == pytest.approx(0.0, abs=1e-12)
    # only the last k rows take part
    rows = [{"dofs": 10, "err": 1e9}] + [{"dofs": d, "err": d ** -0.5} for d in dofs]
    assert convergence_slope(rows, "err", k=4) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        convergence_slope(rows[:1], "err")


def _record(level, dofs, **kw):
    base = dict(level=level, dofs=dofs, cells=2 * dofs, eta=1.0 / dofs, eta1=0.5, eta2=0.25,
                eta3=0.0, err_l2=0.1, err_h1=0.2, err_energy=0.05, effectivity=20.0 / dofs,
                smear=math.nan, osc=1.0, iters=3, rejects=0, converged=True, residual=1e-9,
                marked=4, seconds=0.123)
    base.update(kw)
    return LevelRecord(**base)


def _trace(meshes):
    levels = [_record(i, m.n_vertices) for i, m in enumerate(meshes)]
    return SimpleNamespace(levels=levels, final_mesh=meshes[-1] if meshes else None,
                           final_u=np.zeros(meshes[-1].n_vertices) if meshes else None,
                           case="boundary_layer", grid="1", method="bjk",
                           all_converged=True, config={"dof_budget": 10})


def test_empty_trace_gives_header_only(tmp_path):
    manifest = write_outputs(_trace([]), tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text == ",".join(METRICS_HEADER) + "\n"
    assert manifest["files"]["solutions"] == []


def test_three_levels_give_three_rows_and_vtk_files(tmp_path):
    meshes = [make_root_grid("1")]
    for _ in range(2):
        meshes.append(refine_uniform(meshes[-1]))
    trace = _trace(meshes)
    writer = RunWriter(tmp_path)
    for rec, mesh in zip(trace.levels, meshes):
        writer.level(rec, mesh, mesh.vertices[:, 0])
    manifest = writer.finish(trace)
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r["dofs"] for r in rows] == [9.0, 25.0, 81.0]
    assert sorted(p.name for p in tmp_path.glob("*.vtk")) == manifest["files"]["solutions"]
    assert len(manifest["files"]["solutions"]) == 3
    pts, cells, vals = read_vtk(tmp_path / "solution_002.vtk")
    assert np.array_equal(pts, meshes[2].vertices)
    assert np.array_equal(cells, meshes[2].cells)
    assert np.array_equal(vals, meshes[2].vertices[:, 0])
    text = (tmp_path / "solution_000.vtk").read_text()
    assert "DATASET UNSTRUCTURED_GRID" in text and "CELL_TYPES 8" in text


def test_exported_mesh_round_trips(tmp_path):
    mesh = refine_uniform(make_root_grid("3"))
    write_outputs(_trace([mesh]), tmp_path)
    back = read_mesh(tmp_path / "final_mesh")
    assert back.n_vertices == mesh.n_vertices and back.n_cells == mesh.n_cells
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)


def test_header_is_frozen_and_versioned(tmp_path):
    assert METRICS_HEADER == ("level", "dofs", "eta", "eta1", "eta2", "eta3", "err_l2",
                              "err_h1", "err_energy", "effectivity", "smear", "osc", "iters",
                              "rejects", "seconds")
    write_outputs(_trace([make_root_grid("1")]), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["metrics_header"] == list(METRICS_HEADER)
    assert manifest["metrics_schema"] == 1
    assert manifest["config"] == {"dof_budget": 10}


def test_seconds_column_is_opt_in(tmp_path):
    levels = [_record(0, 9), _record(1, 25)]
    write_metrics_csv(levels, tmp_path / "a.csv")
    write_metrics_csv(levels, tmp_path / "b.csv", include_timing=True)
    with (tmp_path / "a.csv").open() as fh:
        assert [r["seconds"] for r in csv.DictReader(fh)] == ["", ""]
    with (tmp_path / "b.csv").open() as fh:
        assert [r["seconds"] for r in csv.DictReader(fh)] == ["0.123", "0.123"]
    # NaN fields stay blank, integers stay integral
    row = (tmp_path / "a.csv").read_text().splitlines()[1].split(",")
    assert row[METRICS_HEADER.index("smear")] == ""
    assert row[METRICS_HEADER.index("iters")] == "3"


def test_timings_file_sums_levels(tmp_path):
    write_outputs(_trace([make_root_grid("1"), make_root_grid("2")]), tmp_path)
    lines = (tmp_path / "timings.csv").read_text().splitlines()
    assert lines[0] == "level,dofs,seconds"
    assert lines[-1] == "total,,0.246"
