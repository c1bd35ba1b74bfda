"""Metrics and run outputs (CSV tables, VTK solutions, mesh files, manifest)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from .mesh import Mesh, write_mesh

METRICS_HEADER = ("level", "dofs", "eta", "eta1", "eta2", "eta3", "err_l2", "err_h1",
                  "err_energy", "effectivity", "smear", "osc", "iters", "rejects", "seconds")
METRICS_SCHEMA_VERSION = 1


def smear_metric(samples, lo: float = 0.1, hi: float = 0.9) -> float:
    """Distance between the first samples reaching ``lo`` and ``hi``.

    ``samples`` holds rows ``(s, value)`` ordered by ``s``.  Returns NaN if
    either level is never reached.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    s, v = arr[:, 0], arr[:, 1]
    reach_lo = np.flatnonzero(v >= lo)
    reach_hi = np.flatnonzero(v >= hi)
    if reach_lo.size == 0 or reach_hi.size == 0:
        return math.nan
    return float(s[reach_hi[0]] - s[reach_lo[0]])


def osc_metric(u) -> float:
    u = np.asarray(u, dtype=float)
    return float(u.max() - u.min()) if u.size else math.nan


def _field(row, name):
    return row[name] if isinstance(row, dict) else getattr(row, name)


def convergence_slope(rows, field: str, k: int = 6) -> float:
    """Least-squares slope of ``log(field)`` against ``log(dofs)`` over the last ``k`` rows."""
    rows = list(rows)[-k:]
    if len(rows) < 2:
        raise ValueError("need at least two rows to fit a slope")
    x = np.log([float(_field(r, "dofs")) for r in rows])
    y = np.log([float(_field(r, field)) for r in rows])
    return float(np.polyfit(x, y, 1)[0])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def metrics_rows(levels, include_timing: bool = False):
    for rec in levels:
        row = []
        for name in METRICS_HEADER:
            if name == "seconds" and not include_timing:
                row.append("")
            else:
                row.append(_fmt(_field(rec, name)))
        yield row


def write_metrics_csv(levels, path, include_timing: bool = False) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(levels, include_timing))
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v != "" else math.nan) for k, v in r.items()})
    return out


def write_timings_csv(levels, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("level", "dofs", "seconds"))
        total = 0.0
        for rec in levels:
            sec = float(_field(rec, "seconds"))
            total += sec
            w.writerow((_fmt(_field(rec, "level")), _fmt(_field(rec, "dofs")), _fmt(sec)))
        w.writerow(("total", "", _fmt(total)))
    return path


def write_vtk(mesh: Mesh, u, path, name: str = "u") -> Path:
    """Legacy ASCII VTK unstructured grid with one point scalar."""
    path = Path(path)
    n, m = mesh.n_vertices, mesh.n_cells
    lines = ["# vtk DataFile Version 2.0", "afcadapt solution", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    lines.append(f"CELLS {m} {4 * m}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells.tolist()]
    lines.append(f"CELL_TYPES {m}")
    lines += ["5"] * m
    lines += [f"POINT_DATA {n}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
    lines += [repr(v) for v in np.asarray(u, dtype=float).tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path):
    """Read back a file produced by :func:`write_vtk`: ``(points, cells, values)``."""
    tokens = Path(path).read_text().split("\n")
    i = tokens.index(next(t for t in tokens if t.startswith("POINTS")))
    n = int(tokens[i].split()[1])
    pts = np.array([[float(v) for v in t.split()[:2]] for t in tokens[i + 1:i + 1 + n]])
    j = i + 1 + n
    m = int(tokens[j].split()[1])
    cells = np.array([[int(v) for v in t.split()[1:]] for t in tokens[j + 1:j + 1 + m]])
    k = next(idx for idx, t in enumerate(tokens) if t.startswith("LOOKUP_TABLE"))
    vals = np.array([float(t) for t in tokens[k + 1:k + 1 + n]])
    return pts, cells, vals


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


class RunWriter:
    """Writes one run directory; use :meth:`level` as the adaptive-loop callback."""

    def __init__(self, directory, write_solutions: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write_solutions = write_solutions
        self.vtk_files: list[str] = []

    def level(self, record, mesh: Mesh, u) -> None:
        if self.write_solutions:
            name = f"solution_{int(_field(record, 'level')):03d}.vtk"
            write_vtk(mesh, u, self.dir / name)
            self.vtk_files.append(name)

    def finish(self, trace, extra: dict | None = None, include_timing: bool = False) -> dict:
        files = {"metrics": "metrics.csv", "timings": "timings.csv",
                 "solutions": list(self.vtk_files)}
        write_metrics_csv(trace.levels, self.dir / "metrics.csv", include_timing)
        write_timings_csv(trace.levels, self.dir / "timings.csv")
        if trace.final_mesh is not None:
            written = write_mesh(trace.final_mesh, self.dir / "final_mesh")
            files["final_mesh"] = [p.name for p in written]
        manifest = {
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "metrics_header": list(METRICS_HEADER),
            "case": trace.case, "grid": trace.grid, "method": trace.method,
            "levels": len(trace.levels),
            "all_converged": trace.all_converged,
            "config": trace.config,
            "files": files,
        }
        if extra:
            manifest["run"] = extra
        (self.dir / "manifest.json").write_text(
            json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return manifest


def write_outputs(trace, directory, snapshots=None, extra: dict | None = None,
                  include_timing: bool = False) -> dict:
    """Write metrics, timings, final mesh, manifest and VTK files for ``snapshots``.

    ``snapshots`` is an iterable of ``(record, mesh, u)`` triples; by default
    only the final solution is exported.
    """
    writer = RunWriter(directory)
    if snapshots is None and trace.final_mesh is not None and trace.levels:
        snapshots = [(trace.levels[-1], trace.final_mesh, trace.final_u)]
    for rec, mesh, u in snapshots or []:
        writer.level(rec, mesh, u)
    return writer.finish(trace, extra, include_timing)
