"""Batch command line front-end.

Subcommands
-----------
run     adaptive runs over a case x grid x method matrix
grids   write the root meshes of a case
check   run the mesh invariant suite on a mesh file

Configuration may come from a flat ``key = value`` file (``--config``);
command-line flags override file values.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapt import MarkingConfig, run_adaptive
from .mesh import check_invariants, read_mesh, write_mesh
from .nlsolve import SolverConfig
from .problems import CASES, get_case
from .report import RunWriter
from .stabilize import METHODS

SOLVER_KEYS = {f.name for f in fields(SolverConfig)}
MARKING_KEYS = {f.name for f in fields(MarkingConfig)} - {"dof_budget"}


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    case: str = "boundary_layer"
    grids: tuple = ("1",)
    methods: tuple = ("bjk",)
    dof_budget: int = 30_000
    epsilon: float | None = None
    output: str = "runs"
    solver: dict = field(default_factory=dict)
    marking: dict = field(default_factory=dict)
    cutline_intervals: int = 100_000
    bbk_p: float = 10.0
    write_solutions: bool = True
    include_timing: bool = False
    deterministic: bool = True  # no randomness anywhere; kept for the manifest

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def marking_config(self) -> MarkingConfig:
        return MarkingConfig(dof_budget=self.dof_budget, **self.marking)


def _split_list(value: str) -> tuple:
    return tuple(v.strip() for v in value.replace(",", " ").split() if v.strip())


def _number(key: str, value, kind):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"malformed value for {key}: {value!r}") from None


def _bool(key: str, value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"malformed value for {key}: {value!r}")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_INT_SOLVER = {"max_iterations", "grow_after"}
_INT_MARKING = {"initial_uniform_steps"}


def build_config(values: dict) -> RunConfig:
    """Validate a flat mapping of settings into a :class:`RunConfig`.

    Keys of :class:`SolverConfig` and :class:`MarkingConfig` may be given
    directly (``residual_factor = 1e-10``).
    """
    cfg = RunConfig()
    for key, value in values.items():
        if value is None:
            continue
        if key == "case":
            cfg.case = str(value)
        elif key in ("grid", "grids"):
            cfg.grids = _split_list(value) if isinstance(value, str) else tuple(map(str, value))
        elif key in ("method", "methods"):
            cfg.methods = _split_list(value) if isinstance(value, str) else tuple(value)
        elif key == "dof_budget":
            cfg.dof_budget = _number(key, value, lambda v: int(float(v)))
        elif key == "epsilon":
            cfg.epsilon = _number(key, value, float)
        elif key == "output":
            cfg.output = str(value)
        elif key == "cutline_intervals":
            cfg.cutline_intervals = _number(key, value, int)
        elif key == "bbk_p":
            cfg.bbk_p = _number(key, value, float)
        elif key in ("write_solutions", "include_timing"):
            setattr(cfg, key, _bool(key, value))
        elif key in SOLVER_KEYS:
            cfg.solver[key] = _number(key, value, int if key in _INT_SOLVER else float)
        elif key in MARKING_KEYS:
            cfg.marking[key] = _number(key, value, int if key in _INT_MARKING else float)
        else:
            raise ConfigError(f"unknown configuration key: {key}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.case not in CASES:
        raise ConfigError(f"unknown case {cfg.case!r}; valid cases: {', '.join(CASES)}")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods:
        raise ConfigError(f"unknown method {bad[0] if bad else '(none)'!r}; "
                          f"valid methods: {', '.join(METHODS)}")
    case = get_case(cfg.case, cfg.epsilon)
    for g in cfg.grids:
        if g not in case.grids:
            raise ConfigError(f"case {cfg.case} has no grid {g!r}; "
                              f"valid grids: {', '.join(case.grids)}")
        root_dofs = case.root_mesh(g).n_vertices
        if cfg.dof_budget < root_dofs:
            raise ConfigError(f"dof budget {cfg.dof_budget} is below the {root_dofs} dofs "
                              f"of the root mesh of grid {g}")
    try:
        cfg.solver_config()
        cfg.marking_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get("AFC_OUT") or cfg.output)


def run_matrix(cfg: RunConfig, log=print) -> int:
    """Run every (grid, method) pair; 0 iff every level of every run converged."""
    case = get_case(cfg.case, cfg.epsilon)
    root = output_root(cfg)
    ok = True
    for grid in cfg.grids:
        for method in cfg.methods:
            target = root / f"{case.name}_grid{grid}_{method}"
            writer = RunWriter(target, write_solutions=cfg.write_solutions)
            try:
                trace = run_adaptive(case, grid, method, cfg.marking_config(),
                                     cfg.solver_config(), cutline_intervals=cfg.cutline_intervals,
                                     bbk_p=cfg.bbk_p, level_callback=writer.level)
            except Exception as exc:  # keep going; the run is reported as failed
                log(f"{target.name}: FAILED ({type(exc).__name__}: {exc})")
                ok = False
                continue
            writer.finish(trace, extra={"case": cfg.case, "epsilon": case.problem.epsilon,
                                        "deterministic": cfg.deterministic},
                          include_timing=cfg.include_timing)
            last = trace.levels[-1]
            status = "converged" if trace.all_converged else "NOT converged"
            log(f"{target.name}: {len(trace.levels)} levels, {last.dofs} dofs, "
                f"eta={last.eta:.4e}, {status}")
            ok &= trace.all_converged
    return 0 if ok else 1


def _add_run_parser(sub):
    p = sub.add_parser("run", help="adaptive runs over grids x methods")
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--case")
    p.add_argument("--grid", dest="grids", action="append",
                   help="grid id (repeatable or comma separated)")
    p.add_argument("--method", dest="methods", action="append",
                   help=f"one of {', '.join(METHODS)} (repeatable or comma separated)")
    p.add_argument("--dof-budget")
    p.add_argument("--epsilon")
    p.add_argument("--output", "-o")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any solver or marking setting, e.g. residual_factor=1e-10")
    p.add_argument("--no-solutions", action="store_true", help="skip per-level VTK export")
    p.add_argument("--timing", action="store_true", help="fill the seconds column")


def _run_values(args) -> dict:
    values = read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    flags = {"case": args.case, "dof_budget": args.dof_budget, "epsilon": args.epsilon,
             "output": args.output}
    if args.grids:
        flags["grids"] = ",".join(args.grids)
    if args.methods:
        flags["methods"] = ",".join(args.methods)
    if args.no_solutions:
        flags["write_solutions"] = False
    if args.timing:
        flags["include_timing"] = True
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _cmd_grids(args) -> int:
    case = get_case(args.case)
    out = Path(os.environ.get("AFC_OUT") or args.output)
    out.mkdir(parents=True, exist_ok=True)
    for g in case.grids:
        mesh = case.root_mesh(g)
        write_mesh(mesh, out / f"{case.name}_grid{g}")
        print(f"{case.name} grid {g}: {mesh.n_vertices} vertices, {mesh.n_cells} cells")
    return 0


def _cmd_check(args) -> int:
    mesh = read_mesh(args.mesh)
    problems = check_invariants(mesh)
    for msg in problems:
        print(msg)
    print(f"{mesh.n_vertices} vertices, {mesh.n_cells} cells: "
          f"{'OK' if not problems else f'{len(problems)} violation(s)'}")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afcadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    g = sub.add_parser("grids", help="write the root meshes of a case")
    g.add_argument("--case", default="boundary_layer", choices=list(CASES))
    g.add_argument("--output", "-o", default="grids")
    c = sub.add_parser("check", help="check mesh invariants")
    c.add_argument("mesh", help="mesh file stem as written by the grids command")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = build_config(_run_values(args))
            return run_matrix(cfg)
        if args.command == "grids":
            return _cmd_grids(args)
        return _cmd_check(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
