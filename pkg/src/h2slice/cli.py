"""Command-line front end: assemble, eig, nu, bench, export, import.

Exit codes: 0 success, 1 configuration error, 2 factorization failure,
3 input/output failure.
"""

import argparse
from dataclasses import asdict, dataclass, replace
import json
import math
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import h2
from .arithmetic import ldlt
from .cluster import build_block_tree, build_cluster_tree
from .control import TruncationControl
from .mesh import (GEOMETRIES, assemble_mass, assemble_stiffness, build_mesh, read_matrix_market,
                   write_matrix_market, write_mesh)
from .slicing import EPS_EV, FactorizationFailed, Pencil, compute_eigenvalues, nu_record, search_bounds, shift

EXIT_CONFIG = 1
EXIT_FACTORIZATION = 2
EXIT_IO = 3

CSV_EIG_COLUMNS = ("index", "lower", "upper", "value", "nu_evals", "time_ms", "error")
CSV_BENCH_COLUMNS = ("refine", "n", "log_n", "t_single_slice", "t_single_slice_std", "t_per_n", "storage",
                     "max_rank", "slices")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    geometry: str = "unit_square"
    refinements: int = 0
    eta: float = 1.0
    leaf_size: int = 32
    eps_comp: float = 1e-8
    eps_ev: float = EPS_EV
    generalized: bool = False
    index_lo: int = 1
    index_hi: int = 8
    workers: int = 1
    output_format: str = "json"
    seed: int = 0

    def validate(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.refinements < 0:
            raise ConfigError("refinements must be nonnegative")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.leaf_size < 1:
            raise ConfigError("leaf size must be positive")
        for name in ("eps_comp", "eps_ev"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name.replace('_', '-')} must lie in (0, 1)")
        if not 1 <= self.index_lo <= self.index_hi:
            raise ConfigError("need 1 <= index-lo <= index-hi")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.output_format not in ("json", "csv"):
            raise ConfigError("format must be json or csv")
        return self

    def control(self):
        return TruncationControl(eps=self.eps_comp)


# formatting ------------------------------------------------------------

def to_json(obj):
    """JSON text with floats printed to 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return "%.17g" % obj if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v if math.isfinite(v) else "nan"
    return str(v)


def to_csv(columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    return "\n".join(lines)


# problem setup ---------------------------------------------------------

def build_problem(cfg):
    """Mesh, stiffness/mass matrices and the pencil for a configuration."""
    mesh = build_mesh(cfg.geometry, cfg.refinements)
    A = assemble_stiffness(mesh)
    B = assemble_mass(mesh) if cfg.generalized else None
    tree = build_cluster_tree(mesh.dof_coordinates(), cfg.leaf_size)
    blocks = build_block_tree(tree, eta=cfg.eta)
    return mesh, A, B, Pencil(h2.from_sparse(A, blocks, symmetric=True), B)


def eigen_report(cfg, P, results, elapsed, timing=True):
    records = []
    slice_times = []
    for r in results:
        slice_times.append(r.wall_time)
        records.append({
            "index": r.index,
            "lower": r.lower,
            "upper": r.upper,
            "value": r.value,
            "nu_evals": r.nu_evaluations,
            "time_ms": 1e3 * r.wall_time if timing else None,
            "error": r.error,
        })
    t = np.array(slice_times) if slice_times else np.zeros(1)
    totals = {
        "n": P.n,
        "count": len(results),
        "t_total": elapsed if timing else None,
        "t_per_slice_mean": float(t.mean()) if timing else None,
        "t_per_slice_std": float(t.std()) if timing else None,
        "max_rank": max((r.max_rank_seen for r in results), default=0),
        "failures": sum(1 for r in results if r.error),
    }
    return {"command": "eig", "config": asdict(cfg), "records": records, "totals": totals}


def benchmark_refinement(cfg, refinement, shifts=3, index_hi=8):
    """Mean time of one slice (a shifted factorization plus inertia count) at one refinement level."""
    sub = replace(cfg, refinements=refinement)
    _, _, _, P = build_problem(sub)
    control = sub.control()
    with threadpool_limits(1):
        a, b, _, _ = search_bounds(P, 1, min(index_hi, P.n), control)
        sigmas = [a + (b - a) * (j + 1) / (shifts + 1) for j in range(shifts)]
        records = [nu_record(P, s, control) for s in sigmas]
        F = ldlt(shift(P, records[-1].sigma), control)
    times = [r.seconds for r in records]
    storage = h2.storage_report(F.L)["total"]
    return {
        "refine": refinement,
        "n": P.n,
        "log_n": math.log(P.n),
        "t_single_slice": float(np.mean(times)),
        "t_single_slice_std": float(np.std(times)),
        "t_per_n": float(np.mean(times)) / P.n,
        "storage": storage,
        "max_rank": max(max(r.max_rank for r in records), F.max_rank),
        "slices": len(records),
    }


# commands --------------------------------------------------------------

def _emit(args, text):
    if args.output:
        try:
            with open(args.output, "w") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise IOError(str(exc)) from exc
    else:
        print(text)


def _config(args):
    lo = args.index_lo
    hi = args.index_hi
    if args.count is not None:
        if args.count < 1:
            raise ConfigError("count must be at least 1")
        hi = lo + args.count - 1
    workers = args.workers
    if workers is None:
        env = os.environ.get("H2SLICE_WORKERS")
        try:
            workers = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"H2SLICE_WORKERS must be an integer, got {env!r}") from None
    return RunConfig(
        geometry=args.geometry, refinements=args.refine, eta=args.eta, leaf_size=args.leaf_size,
        eps_comp=args.eps_comp, eps_ev=args.eps_ev, generalized=args.generalized,
        index_lo=lo, index_hi=hi, workers=workers, output_format=args.format, seed=args.seed,
    ).validate()


def cmd_assemble(args):
    cfg = _config(args)
    mesh, A, B, P = build_problem(cfg)
    summary = {"command": "assemble", "config": asdict(cfg), "n": P.n,
               "nnz_stiffness": int(A.nnz), "block_tree": P.A.blocks.stats(),
               "storage": h2.storage_report(P.A)}
    if args.out_dir:
        try:
            os.makedirs(args.out_dir, exist_ok=True)
            write_mesh(mesh, os.path.join(args.out_dir, "mesh.txt"))
            write_matrix_market(A, os.path.join(args.out_dir, "stiffness.mtx"))
            write_matrix_market(assemble_mass(mesh), os.path.join(args.out_dir, "mass.mtx"))
            h2.dump(P.A, os.path.join(args.out_dir, "stiffness.h2"))
        except OSError as exc:
            raise IOError(str(exc)) from exc
        summary["files"] = ["mesh.txt", "stiffness.mtx", "mass.mtx", "stiffness.h2"]
    _emit(args, to_json(summary))
    return 0


def _pencil_from_args(args, cfg):
    if args.input:
        try:
            A = h2.load(args.input)
            B = read_matrix_market(args.mass) if args.mass else None
        except (OSError, h2.FormatError) as exc:
            raise IOError(str(exc)) from exc
        return Pencil(A, B)
    return build_problem(cfg)[3]


def cmd_eig(args):
    cfg = _config(args)
    P = _pencil_from_args(args, cfg)
    if cfg.index_hi > P.n:
        raise ConfigError(f"index-hi {cfg.index_hi} exceeds n={P.n}")
    start = time.perf_counter()
    results = compute_eigenvalues(P, (cfg.index_lo, cfg.index_hi), cfg.eps_ev, cfg.control(),
                                  workers=cfg.workers, task_granularity=args.task_granularity)
    elapsed = time.perf_counter() - start
    report = eigen_report(cfg, P, results, elapsed, timing=not args.no_timing)
    if cfg.output_format == "csv":
        _emit(args, to_csv(CSV_EIG_COLUMNS, report["records"]))
    else:
        _emit(args, to_json(report))
    return EXIT_FACTORIZATION if report["totals"]["failures"] else 0


def cmd_nu(args):
    cfg = _config(args)
    P = _pencil_from_args(args, cfg)
    with threadpool_limits(1):
        rec = nu_record(P, args.sigma, cfg.control())
    out = {"command": "nu", "n": P.n, "sigma": args.sigma, "sigma_used": rec.sigma,
           "nu": rec.count, "attempts": rec.attempts, "max_rank": rec.max_rank,
           "time_ms": None if args.no_timing else 1e3 * rec.seconds}
    if cfg.output_format == "csv":
        _emit(args, to_csv(tuple(out), [out]))
    else:
        _emit(args, to_json(out))
    return 0


def cmd_bench(args):
    cfg = _config(args)
    try:
        levels = [int(v) for v in args.refine_list.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad refinement list {args.refine_list!r}") from None
    if not levels or min(levels) < 0:
        raise ConfigError("refinement list must hold nonnegative integers")
    rows = [benchmark_refinement(cfg, r, shifts=args.shifts) for r in levels]
    if args.no_timing:
        for row in rows:
            row["t_single_slice"] = row["t_single_slice_std"] = row["t_per_n"] = None
    if cfg.output_format == "json":
        _emit(args, to_json({"command": "bench", "config": asdict(cfg), "rows": rows}))
    else:
        _emit(args, to_csv(CSV_BENCH_COLUMNS, rows))
    return 0


def cmd_export(args):
    cfg = _config(args)
    _, _, _, P = build_problem(cfg)
    try:
        h2.dump(P.A, args.path)
    except OSError as exc:
        raise IOError(str(exc)) from exc
    _emit(args, to_json({"command": "export", "path": args.path, "n": P.n,
                         "storage": h2.storage_report(P.A)}))
    return 0


def cmd_import(args):
    try:
        M = h2.load(args.path)
    except (OSError, h2.FormatError) as exc:
        raise IOError(str(exc)) from exc
    x = np.random.default_rng(args.seed).standard_normal(M.n)
    y = M.matvec(x)
    _emit(args, to_json({"command": "import", "path": args.path, "n": M.n,
                         "symmetric": M.symmetric, "max_rank": M.max_rank(),
                         "storage": h2.storage_report(M), "block_tree": M.blocks.stats(),
                         "matvec_norm": float(np.linalg.norm(y))}))
    return 0


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--geometry", default="unit_square", choices=GEOMETRIES)
    p.add_argument("--refine", type=int, default=0, help="refinement level r (r=0 is the coarsest mesh)")
    p.add_argument("--eta", type=float, default=1.0, help="admissibility parameter")
    p.add_argument("--leaf-size", type=int, default=32)
    p.add_argument("--eps-comp", type=float, default=1e-8, help="blockwise compression tolerance")
    p.add_argument("--eps-ev", type=float, default=EPS_EV, help="bisection interval width")
    p.add_argument("--generalized", action="store_true", help="use the mass matrix as B")
    p.add_argument("--index-lo", type=int, default=1)
    p.add_argument("--index-hi", type=int, default=8)
    p.add_argument("--count", type=int, help="number of eigenvalues starting at index-lo")
    p.add_argument("--workers", type=int, help="worker processes (default $H2SLICE_WORKERS or 1)")
    p.add_argument("--format", default="json", choices=("json", "csv"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="write to this file instead of stdout")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields (reproducible output)")


def make_parser():
    parser = _Parser(prog="h2slice", description="Eigenvalues of FEM pencils by H^2 spectrum slicing")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("assemble", help="build mesh, matrices and block tree")
    _common(p)
    p.add_argument("--out-dir", help="write mesh, MatrixMarket files and the H^2 dump here")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eig", help="compute eigenvalues by spectrum slicing")
    _common(p)
    p.add_argument("--input", help="H^2 dump of A (instead of assembling)")
    p.add_argument("--mass", help="MatrixMarket file of B for --input")
    p.add_argument("--task-granularity", type=int, help="eigenvalues per task")
    p.set_defaults(func=cmd_eig)

    p = sub.add_parser("nu", help="count eigenvalues below a shift")
    _common(p)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--input", help="H^2 dump of A (instead of assembling)")
    p.add_argument("--mass", help="MatrixMarket file of B for --input")
    p.set_defaults(func=cmd_nu)

    p = sub.add_parser("bench", help="single-slice timings over a refinement sweep")
    _common(p)
    p.add_argument("--refine-list", default="0,1,2")
    p.add_argument("--shifts", type=int, default=3, help="slices timed per level")
    p.set_defaults(func=cmd_bench, format="csv")

    p = sub.add_parser("export", help="write the stiffness matrix in H^2 binary form")
    _common(p)
    p.add_argument("path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="read an H^2 dump and summarize it")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"h2slice: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if isinstance(exc, h2.FormatError):
            print(f"h2slice: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"h2slice: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FactorizationFailed as exc:
        print(f"h2slice: {exc}", file=sys.stderr)
        return EXIT_FACTORIZATION
    except (IOError, OSError) as exc:
        print(f"h2slice: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
