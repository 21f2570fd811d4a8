"""Command-line entry point.

Commands: ``build-table``, ``solve``, ``cross-eval``, ``bench``. Settings
come from ``--config`` (YAML) overridden by flags. Every output file starts
with a ``#`` header carrying the library version and the config hash.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RUN_MODES, RunConfig, build_problem, load_config_file, resolve_config
from .errors import SimredError, TableBuildError
from .integrator import IntegratorOptions
from .manifold import (OfflineBackend, OnlineBackend, TableSpec, build_offline_table,
                       interpolant_from_table, read_node_table, write_node_table)
from .shooting import cross_evaluate, run_statistics, solution_summary, solve_ocp, write_trajectory_csv

log = logging.getLogger("simred")

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_USAGE = 64

_NEG_VALUE = re.compile(r"^-\d|^-\.\d")


def _fix_negative_values(argv):
    """Join ``--x0 -10,0`` into ``--x0=-10,0`` so argparse does not read the
    value as an option."""
    out = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a in ("--x0", "--eps") and i + 1 < len(argv) and _NEG_VALUE.match(argv[i + 1]):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def make_parser():
    parser = argparse.ArgumentParser(prog="simred", description="Slow-manifold model reduction and "
                                     "multiple-shooting optimal control.")
    parser.add_argument("--version", action="version", version=f"simred {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--problem", help="built-in problem: enzyme or vr")
        p.add_argument("--mode", choices=RUN_MODES)
        p.add_argument("--eps", type=float)
        p.add_argument("--x0", type=_floats, help="comma separated full initial state")
        p.add_argument("--n-intervals", type=int, dest="n_intervals")
        p.add_argument("--tol", type=float, help="NLP tolerance")
        p.add_argument("--integ-tol", type=float, dest="integ_tol")
        p.add_argument("--table", dest="table_path", help="node-table file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--verbose", "-v", action="count", default=0)

    for name, help_ in (("build-table", "sweep the manifold on a grid and write a node table"),
                        ("solve", "solve the OCP in one mode"),
                        ("cross-eval", "solve in a reduced mode and replay the control on the full system"),
                        ("bench", "compare several modes on one problem")):
        p = sub.add_parser(name, help=help_)
        common(p)
        if name == "bench":
            p.add_argument("--modes", type=lambda s: s.split(","), help="comma separated modes (at least 2)")
        if name == "cross-eval":
            p.add_argument("--y0", type=_floats, help="fast initial state for the replay")
    return parser


def _config_from_args(args) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in ("problem", "mode", "eps", "x0", "n_intervals", "tol",
                                                 "integ_tol", "table_path", "out", "modes")}
    file_data = load_config_file(args.config) if args.config else None
    return resolve_config(flags, file_data)


def _header(cfg: RunConfig, command: str):
    return [f"simred {__version__}", f"config_hash={cfg.hash()}", f"command={command}"]


def _integ_opts(cfg):
    return IntegratorOptions(rel_tol=cfg.integ_tol, abs_tol=cfg.integ_tol)


def _table_spec(cfg, ocp) -> TableSpec:
    if not cfg.table:
        raise ValueError("no table spec configured for this problem")
    t = cfg.table
    return TableSpec(t["lower"], t["upper"], t["counts"], hermite=t.get("hermite", True),
                     overlap=t.get("overlap", 0.05), min_pts_per_patch=t.get("min_pts_per_patch", 10))


def _offline_backend(cfg, ocp, out_dir):
    sys_ = ocp.system
    if cfg.table_path and Path(cfg.table_path).exists():
        table = read_node_table(cfg.table_path)
        lo = table.meta.get("lower")
        hi = table.meta.get("upper")
        interp = interpolant_from_table(table, lower=lo, upper=hi)
    else:
        spec = _table_spec(cfg, ocp)
        table, interp, report = build_offline_table(sys_, spec)
        path = Path(cfg.table_path) if cfg.table_path else out_dir / "table.txt"
        write_node_table(path, table, {"config_hash": cfg.hash()})
        log.info("built node table %s (%d nodes)", path, table.n_nodes)
    return OfflineBackend(interp, sys_.p, sys_.m)


def _backend(cfg, ocp, mode, out_dir):
    if mode == "full":
        return None
    if mode == "reduced-online":
        return OnlineBackend(ocp.system)
    return _offline_backend(cfg, ocp, out_dir)


def _solve(cfg, ocp, mode, out_dir):
    backend = _backend(cfg, ocp, mode, out_dir)
    return solve_ocp(ocp, "full" if mode == "full" else "reduced", backend, tol=cfg.tol,
                     integ_opts=_integ_opts(cfg), max_iter=cfg.max_iter), backend


def cmd_build_table(cfg: RunConfig) -> int:
    ocp = build_problem(cfg)
    spec = _table_spec(cfg, ocp)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        table, _, report = build_offline_table(ocp.system, spec)
    except TableBuildError as exc:
        print(f"table build failed: {exc}", file=sys.stderr)
        for k, pt, msg in exc.failures:
            print(f"  node {k} at {pt}: {msg}", file=sys.stderr)
        return EXIT_FAILED
    path = Path(cfg.table_path) if cfg.table_path else out_dir / "table.txt"
    write_node_table(path, table, {"config_hash": cfg.hash(), "version": __version__})
    lines = [f"# {h}" for h in _header(cfg, "build-table")] + [report.summary()]
    (out_dir / "build_report.txt").write_text("\n".join(lines) + "\n")
    print(report.summary())
    print(f"node table: {path}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    ocp = build_problem(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sol, _ = _solve(cfg, ocp, cfg.mode, out_dir)
    elapsed = time.perf_counter() - t0
    header = _header(cfg, "solve")
    write_trajectory_csv(out_dir / "trajectory.csv", sol.trajectory, header)
    summary = solution_summary(sol, {"problem": ocp.name, "run_mode": cfg.mode})
    (out_dir / "summary.txt").write_text("".join(f"# {h}\n" for h in header) + summary)
    print(summary + f"wall_seconds = {elapsed:.3f}")
    return EXIT_OK if sol.success else EXIT_FAILED


def cmd_cross_eval(cfg: RunConfig, y0=None) -> int:
    ocp = build_problem(cfg)
    if cfg.mode == "full":
        raise ValueError("cross-eval needs a reduced mode")
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sol, backend = _solve(cfg, ocp, cfg.mode, out_dir)
    y_start = ocp.initial_fast if y0 is None else np.asarray(y0, dtype=float)
    obj, traj = cross_evaluate(ocp, sol.controls, y0=y_start)
    header = _header(cfg, "cross-eval")
    write_trajectory_csv(out_dir / "cross_trajectory.csv", traj, header)
    text = (f"reduced_status = {sol.status}\nreduced_objective = {sol.objective:.10g}\n"
            f"cross_objective = {obj:.10g}\ny0 = {','.join(f'{v:.10g}' for v in y_start)}\n")
    (out_dir / "cross_eval.txt").write_text("".join(f"# {h}\n" for h in header) + text)
    print(text, end="")
    return EXIT_OK if sol.success else EXIT_FAILED


def cmd_bench(cfg: RunConfig) -> int:
    modes = list(dict.fromkeys(cfg.modes))
    if len(modes) < 2:
        raise ValueError("bench needs at least 2 distinct modes")
    ocp = build_problem(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        t0 = time.perf_counter()
        try:
            sol, _ = _solve(cfg, ocp, mode, out_dir)
            st = run_statistics(sol)
            cross = (cross_evaluate(ocp, sol.controls, y0=ocp.initial_fast)[0]
                     if mode != "full" else sol.objective)
            rows.append({"mode": mode, "status": sol.status, "objective": sol.objective,
                         "cross_objective": cross, "nlp_iter": st["nlp_iterations"],
                         "steps": st["steps_accepted"], "rejected": st["steps_rejected"],
                         "seconds": time.perf_counter() - t0})
        except (SimredError, ValueError, ArithmeticError) as exc:
            log.error("mode %s failed: %s", mode, exc)
            rows.append({"mode": mode, "status": f"error: {exc}"})
    full = next((r for r in rows if r["mode"] == "full" and "steps" in r), None)
    cols = ["mode", "status", "objective", "cross_objective", "cross_ratio", "nlp_iter", "steps",
            "rejected", "step_ratio"]
    lines = [",".join(cols)]
    for r in rows:
        if full is not None and "steps" in r:
            r["step_ratio"] = full["steps"] / max(r["steps"], 1)
            r["cross_ratio"] = r["cross_objective"] / full["objective"] if full["objective"] else float("nan")
        lines.append(",".join(_fmt(r.get(c, "")) for c in cols))
    header = _header(cfg, "bench")
    (out_dir / "bench.csv").write_text("".join(f"# {h}\n" for h in header) + "\n".join(lines) + "\n")
    print("\n".join(lines))
    for r in rows:
        if "seconds" in r:
            print(f"# {r['mode']}: {r['seconds']:.2f} s wall")
    failed = any(r["status"] != "converged" for r in rows)
    return EXIT_FAILED if failed else EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def main(argv=None) -> int:
    argv = _fix_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "build-table":
            return cmd_build_table(cfg)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "cross-eval":
            return cmd_cross_eval(cfg, args.y0)
        return cmd_bench(cfg)
    except ValueError as exc:
        parser.error(str(exc))  # exits with status 2
    except SimredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
