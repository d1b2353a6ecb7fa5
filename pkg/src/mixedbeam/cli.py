"""``beam`` command line: run benchmarks, sweeps and generic problem documents.

Exit codes: 0 success, 2 oracle mismatch, 3 solver non-convergence,
4 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import tomli

from . import bench
from .element import RelativeRotationTooLarge
from .model import InvalidMesh
from .problem import ProblemError, build_load_case, build_mesh, load_problem, solver_config
from .solver import NonConvergence, SingularTangent, centerline_samples, continuation, node_positions

EXIT_OK, EXIT_ORACLE, EXIT_SOLVER, EXIT_INPUT = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is reserved for oracle mismatches here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="beam", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def out_opts(p):
        p.add_argument("--out", default="out", help="output directory (default ./out)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--no-timing", action="store_true", help="write zero wall times for byte-stable output")

    b = sub.add_parser("bench", help="run one benchmark")
    b.add_argument("name", help="benchmark name, see 'beam list'")
    b.add_argument("--k", type=int)
    b.add_argument("--nelem", type=int)
    b.add_argument("--rho", type=float)
    b.add_argument("--integration", choices=("full", "reduced"))
    out_opts(b)

    s = sub.add_parser("sweep", help="run a convergence sweep described by a TOML file")
    s.add_argument("--spec", required=True, help="sweep file with [[grid]] tables")
    out_opts(s)

    r = sub.add_parser("run", help="solve a generic problem document")
    r.add_argument("--problem", required=True)
    out_opts(r)

    sub.add_parser("list", help="print the benchmarks and their embedded constants")
    return ap


def _print_report(report: bench.BenchmarkReport) -> None:
    for c in report.cases:
        e = "" if c.e_l2 is None else f" e_l2={c.e_l2:.3e}"
        r = "" if c.rate is None else f" rate={c.rate:.2f}"
        print(
            f"{c.benchmark} k={c.k} nelem={c.nelem} rho={c.rho} {c.integration}:"
            f" u=({c.u[0]:.7g}, {c.u[1]:.7g}, {c.u[2]:.7g}){e}{r} iters={c.newton_total_iters} {c.wall_ms} ms"
        )
    for chk in report.checks:
        print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.detail}")


def _load_sweep(path: str) -> list[dict]:
    with open(path, "rb") as f:
        doc = tomli.load(f)
    grids = doc.get("grid")
    if not isinstance(grids, list) or not grids:
        raise bench.InvalidInput("sweep file needs at least one [[grid]] table")
    for g in grids:
        name = g.get("benchmark", "rollup")
        if name not in bench.REGISTRY:
            raise bench.InvalidInput(f"unknown benchmark {name!r} in sweep file")
        unknown = set(g) - {"benchmark", "k", "nelem", "rho", "integration"}
        if unknown:
            raise bench.InvalidInput(f"unknown sweep keys: {', '.join(sorted(unknown))}")
    return grids


def _run_problem(path: str) -> bench.BenchmarkReport:
    problem = load_problem(path)
    mesh = build_mesh(problem)
    config = solver_config(problem)
    t0 = time.perf_counter()
    rep = continuation(mesh, build_load_case(problem), config)
    tip = mesh.node("tip") if "tip" in mesh.markers else mesh.n_nodes - 1
    u = node_positions(mesh, rep.state)[tip] - mesh.nodes[tip].r0
    case = bench.CaseResult(
        benchmark="run",
        k=int(problem.geometry["k"]),
        nelem=mesh.n_elements,
        rho=None,
        integration=problem.solver.get("integration", "reduced"),
        e_l2=None,
        rate=None,
        u=[float(x) for x in u],
        newton_total_iters=rep.total_iterations,
        wall_ms=int(round(1e3 * (time.perf_counter() - t0))),
        centerline=centerline_samples(mesh, rep.state).tolist(),
    )
    inputs = json.loads(json.dumps(problem.to_dict()))
    return bench.BenchmarkReport("run", inputs, [case], [], config_hash=bench.config_hash(inputs))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        sys.stdout.write(bench.describe())
        return EXIT_OK
    try:
        if args.command == "bench":
            spec = bench.BenchmarkSpec(args.name, args.k, args.nelem, args.rho, args.integration, args.out)
            report = bench.run(spec)
        elif args.command == "sweep":
            report = bench.sweep(_load_sweep(args.spec))
        else:
            report = _run_problem(args.problem)
    except (bench.InvalidInput, ProblemError, InvalidMesh, OSError, tomli.TOMLDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonConvergence, SingularTangent, RelativeRotationTooLarge) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    paths = bench.emit(report, args.out, args.format, timing=not args.no_timing)
    _print_report(report)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK if report.passed else EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
