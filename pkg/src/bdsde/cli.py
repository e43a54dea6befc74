"""Command-line front end: single runs, tables, sweeps, and field export."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .experiments import (
    ExperimentConfig,
    _format_cell,
    build_problem,
    emit_csv,
    load_config,
    repeat_runs,
    run_convergence,
    run_table,
)
from .model import BdsdeError, ConfigError, InvalidStartError, sample_noise
from .oracles import midpoint_lattice, spde_point
from .solver import dump_diagnostics, solve


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdsde",
        description="Monte Carlo solver for backward doubly stochastic "
        "systems with first-exit terminal times",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, reps_help: str) -> None:
        p.add_argument("--config", required=True, help="flat JSON experiment file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--reps", type=int, default=None, help=reps_help)
        p.add_argument("--out", default=None,
                       help="output path (default: config 'out', else stdout)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads; affects speed only, never results")

    p_run = sub.add_parser("run", help="single solve, print Y0/Z0 and diagnostics")
    common(p_run, "if given, also report mean/std over this many repetitions")
    p_table = sub.add_parser("table", help="mode x path-count x time summary table")
    common(p_table, "repetitions per table cell (default: config R_runs)")
    p_conv = sub.add_parser("converge", help="joint N/M/delta refinement sweep")
    common(p_conv, "repetitions per sweep row (default: config R_runs)")
    p_grid = sub.add_parser("spde-grid",
                            help="export u and v on the time grid x midpoint lattice")
    common(p_grid, "average the field over this many noise realizations")
    return parser


def _emit(rows: Sequence[Sequence], out: Optional[str]) -> None:
    if out is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow([str(cell) for cell in rows[0]])
        for row in rows[1:]:
            writer.writerow([_format_cell(cell) for cell in row])
    else:
        emit_csv(rows, out)


# ------------------------------- subcommands ------------------------------- #

def _cmd_run(config: ExperimentConfig, out: Optional[str], args) -> int:
    coeffs, grid, domain, partition, scfg = build_problem(config)
    noise = sample_noise(config.seed, config.M, grid, coeffs.d, coeffs.l)
    sol = solve(coeffs, grid, domain, noise, [config.x0] * coeffs.d, partition,
                scfg, shift_enabled=config.shift_enabled)
    diag = sol.diagnostics
    print(f"mode = {config.mode}, g_choice = {config.g_choice}, "
          f"N = {config.N}, M = {config.M}, delta = {config.delta:g}, "
          f"I = {config.I}, seed = {config.seed}")
    print("Y0 = " + " ".join(f"{v:.10g}" for v in sol.Y0))
    print("Z0 = " + " ".join(f"{v:.10g}" for v in sol.Z0.ravel()))
    print(f"exit_fraction = {diag.exit_fraction:.10g}")
    print(f"empty_cells_y = {int(diag.empty_cells_y.sum())}, "
          f"empty_cells_z = {int(diag.empty_cells_z.sum())}")
    if diag.picard_residuals.size:
        print("max_picard_residual_by_sweep = " + " ".join(
            f"{v:.3g}" for v in diag.picard_residuals.max(axis=0)))
    if args.reps is not None:
        stats = repeat_runs(config, args.reps, threads=args.threads)
        print(f"repetitions = {stats.R_runs}: mean = {stats.mean:.10g}, "
              f"std = {stats.std:.10g}")
    if out is not None:
        dump_diagnostics(sol, out)
        print(f"diagnostics written to {out}")
    return 0


def _cmd_table(config: ExperimentConfig, out: Optional[str], args) -> int:
    rows = run_table(config, args.reps, threads=args.threads)
    _emit(rows, out)
    return 0


def _cmd_converge(config: ExperimentConfig, out: Optional[str], args) -> int:
    if args.reps is not None:
        config = dataclasses.replace(config, R_runs=args.reps)
    rows = run_convergence(config, threads=args.threads)
    _emit(rows, out)
    return 0


def _cmd_spde_grid(config: ExperimentConfig, out: Optional[str], args) -> int:
    coeffs, grid, domain, partition, scfg = build_problem(config)
    points, _ = midpoint_lattice(domain, config.spatial_points)
    reps = 1 if args.reps is None else args.reps
    P = points.shape[0]
    acc_u = np.zeros((grid.N + 1, P))
    acc_v = np.zeros((grid.N + 1, P))
    tasks = [(n, p) for n in range(grid.N + 1) for p in range(P)]
    for rep in range(reps):
        seed = config.seed + rep
        wpath = sample_noise(seed, 1, grid, coeffs.d, coeffs.l).backward

        def one(task: Tuple[int, int]) -> Tuple[float, float]:
            n, p = task
            try:
                u, v = spde_point(coeffs, grid, domain, wpath,
                                  float(grid.times[n]), points[p], config.M,
                                  partition, scfg, seed=seed,
                                  shift_enabled=config.shift_enabled)
            except InvalidStartError:
                # inside the exit-shift collar the stopped scheme exits
                # immediately, so the field takes the boundary payoff
                u = coeffs.eval_phi(float(grid.times[n]), points[p][None, :])[0]
                return float(u[0]), 0.0
            return float(u[0]), float(v[0, 0])

        if args.threads > 1:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                results = list(pool.map(one, tasks))
        else:
            results = [one(task) for task in tasks]
        for (n, p), (u, v) in zip(tasks, results):
            acc_u[n, p] += u
            acc_v[n, p] += v
    rows: List[Tuple] = [("t", "x", "u", "v")]
    for n in range(grid.N + 1):
        for p in range(P):
            rows.append((float(grid.times[n]), float(points[p, 0]),
                         acc_u[n, p] / reps, acc_v[n, p] / reps))
    _emit(rows, out)
    return 0


_DISPATCH = {
    "run": _cmd_run,
    "table": _cmd_table,
    "converge": _cmd_converge,
    "spde-grid": _cmd_spde_grid,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error(f"--threads must be positive, got {args.threads}")
    if args.reps is not None:
        floor = 1 if args.command == "spde-grid" else 2
        if args.reps < floor:
            parser.error(f"--reps must be at least {floor} for {args.command}")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        out = args.out if args.out is not None else config.out
        return _DISPATCH[args.command](config, out, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except BdsdeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
