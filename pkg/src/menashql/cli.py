"""Command-line entry points.

Exit codes: 0 when everything succeeded, 1 when any seed, cell or check
failed, 2 for unusable input (bad config, grid, game or checkpoint file).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import game as zs
from . import harness, multi, textio
from .evaluation import check_learning_rate_properties
from .linprog import SolverError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

_INPUT_ERRORS = (harness.ConfigError, textio.FormatError, zs.CapacityError, multi.CapacityError, OSError)


def _report(rows) -> int:
    for row in rows:
        if row["status"] == "ok":
            print(f"seed {row['seed']}: episodes={row['episodes']} final_value_gap={row['final_value_gap']} "
                  f"nash_gap_final={row['nash_gap_final']} nash_gap_selected={row['nash_gap_selected']} "
                  f"(k*={row['best_episode']})")
        else:
            print(f"seed {row['seed']}: {row['status']}: {row['error']}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAILED


def cmd_run(args) -> int:
    cfg = harness.parse_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    rows = harness.run_experiment(cfg)
    print(f"wrote {Path(cfg.out) / 'summary.csv'}")
    return _report(rows)


def cmd_sweep(args) -> int:
    path = Path(args.config)
    pairs = harness.parse_pairs(path.read_text(), str(path))
    harness.config_from_pairs(pairs, path.parent)  # the base config itself must be valid
    grid = Path(args.grid)
    axes = harness.parse_grid(grid.read_text(), str(grid))
    unknown = [k for k, _ in axes if k not in harness._KEYS]
    if unknown:
        raise harness.ConfigError([f"grid axis `{k}` is not a config key" for k in unknown])
    out = args.out or pairs.get("run.out", "runs")
    rows = harness.sweep(pairs, axes, out, path.parent)
    print(f"wrote {Path(out) / 'sweep_summary.csv'} ({len(rows)} rows)")
    bad = [r for r in rows if r["status"] != "ok"]
    for r in bad:
        print(f"cell {r['cell']} [{r['overrides']}] seed {r['seed']}: {r['status']}: {r['error']}")
    return EXIT_FAILED if bad else EXIT_OK


def cmd_solve(args) -> int:
    game = harness.load_any_game(args.game)
    if isinstance(game, multi.GeneralSumGame):
        raise harness.ConfigError("solve handles two-player zero-sum games only")
    problems = zs.validate(game)
    if problems:
        raise harness.ConfigError(problems[:10])
    try:
        sol = zs.nash_values(game)
    except SolverError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    S, A, B, H = game.dims
    print(f"game: S={S} A={A} B={B} H={H} initial_state={game.initial_state}")
    print(f"V*_1(s1) = {sol.v_star[0, game.initial_state]:.10f}")
    with np.printoptions(precision=6, suppress=True, linewidth=120):
        for h in range(H):
            print(f"h={h}: V* = {sol.v_star[h]}")
            if args.strategies:
                for s in range(S):
                    print(f"  s={s}: max player {sol.nash_row_strategy[h, s]}  min player {sol.nash_col_strategy[h, s]}")
    return EXIT_OK


def cmd_check_theory(args) -> int:
    report = check_learning_rate_properties(args.H, args.N_max)
    print("\n".join(report.lines()))
    print("all learning-rate properties hold" if report.ok else "learning-rate property violations found")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_resume(args) -> int:
    row = harness.resume(args.checkpoint)
    return _report([row])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="menashql", description="Equilibrium learning in tabular Markov games.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides run.out)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a config over the Cartesian product of a grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="lines of 'section.key = v1 v2 ...'")
    s.add_argument("--out", help="output directory (overrides run.out)")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("solve", help="print the exact equilibrium values of a saved game")
    v.add_argument("--game", required=True)
    v.add_argument("--strategies", action="store_true", help="also print the per-state equilibrium strategies")
    v.set_defaults(func=cmd_solve)

    c = sub.add_parser("check-theory", help="numerically verify the learning-rate weight bounds")
    c.add_argument("--H", type=int, nargs="+", default=[1, 2, 5, 10, 32])
    c.add_argument("--N-max", dest="N_max", type=int, default=2000)
    c.set_defaults(func=cmd_check_theory)

    u = sub.add_parser("resume", help="continue a run from one of its checkpoints")
    u.add_argument("--checkpoint", required=True)
    u.set_defaults(func=cmd_resume)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
