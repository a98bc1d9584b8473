"""
Command line entry point.

    python -m app.cli experiment --config cfg.json --out results/ [--workers N]
    python -m app.cli simulate --grid 4 --policy uafr --q 0.9 --seed 0 [--trace steps.jsonl]
    python -m app.cli zonal --raster elev.asc --polygons zones.csv --out covariates.csv

Input errors print one line to stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from app.core.config import settings
from app.core.exceptions import OutputPathError, WildfireError
from app.services.dynamics import load_table_spread
from app.services.geo_io import (
    load_intersections,
    read_ascii_grid,
    read_polygons_csv,
    save_intersections,
    write_neighbors,
)
from app.services.harness import POLICIES, ExperimentConfig, load_experiment_config, play_episode, run_experiment
from app.services.planner import PlannerConfig
from app.services.zonal import STATISTICS, build_intersections, export_covariates, neighbor_join, zonal_stats

logger = logging.getLogger(__name__)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _stat_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    unknown = [s for s in names if s not in STATISTICS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"statistics must be drawn from {','.join(STATISTICS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildfire", description="Wildfire suppression planning and zonal statistics")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level (default from LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("experiment", help="compare policies over generated scenarios")
    exp.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    exp.add_argument("--out", required=True, type=Path, help="output directory for episodes.csv and aggregate.csv")
    exp.add_argument("--workers", type=_positive_int, default=settings.DEFAULT_WORKERS)

    sim = sub.add_parser("simulate", help="play a single episode")
    sim.add_argument("--grid", type=int, default=4, help="grid side length")
    sim.add_argument("--policy", choices=POLICIES, default="baseline")
    sim.add_argument("--q", type=float, default=1.0, help="suppression success probability")
    sim.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    sim.add_argument("--scenario", type=int, default=0, help="scenario index")
    sim.add_argument("--horizon", type=int, default=None)
    sim.add_argument("--simulations", type=_positive_int, default=None, help="planner simulations per step")
    sim.add_argument("--spread-table", type=Path, default=None, help="CSV row,col,prob spread model")
    sim.add_argument("--trace", type=Path, default=None, help="write per-step JSON lines here")

    zon = sub.add_parser("zonal", help="zonal statistics of rasters over polygons")
    zon.add_argument("--raster", required=True, type=Path, action="append", help="ASCII grid; repeat for more layers")
    zon.add_argument("--polygons", required=True, type=Path, help="CSV with columns id,wkt")
    zon.add_argument("--out", required=True, type=Path, help="covariate CSV")
    zon.add_argument("--stats", type=_stat_list, default=list(STATISTICS))
    zon.add_argument("--neighbors", type=Path, default=None, help="write intersecting polygon pairs here")
    zon.add_argument("--intersections", type=Path, default=None, help="reuse or save the intersections file")
    zon.add_argument("--workers", type=_positive_int, default=settings.DEFAULT_WORKERS)
    return parser


def cmd_experiment(args) -> int:
    cfg = load_experiment_config(args.config)
    run_experiment(cfg, args.out, workers=args.workers)
    return 0


def cmd_simulate(args) -> int:
    if args.grid < 2:
        raise WildfireError(f"--grid must be at least 2, got {args.grid}")
    if not 0.0 <= args.q <= 1.0:
        raise WildfireError(f"--q must lie in [0, 1], got {args.q}")
    if args.seed < 0:
        raise WildfireError(f"--seed must be non-negative, got {args.seed}")
    update = {"grid_size": args.grid, "seed": args.seed}
    if args.horizon is not None:
        update["horizon"] = args.horizon
    if args.simulations is not None:
        update["planner"] = PlannerConfig(n_simulations=args.simulations)
    cfg = ExperimentConfig(**update)
    spread = load_table_spread(args.spread_table, args.grid, args.grid) if args.spread_table else None

    try:
        trace = open(args.trace, "w", encoding="utf-8") if args.trace else None
    except OSError as e:
        raise OutputPathError(f"cannot write trace {args.trace}: {e}") from e
    try:
        def on_step(t, state, action, obs, r):
            record = {
                "t": t,
                "fire": state.fire.astype(int).tolist(),
                "fuel": state.fuel.tolist(),
                "action": action.sorted_targets(),
                "observation": obs.astype(int).tolist(),
                "reward": r,
            }
            trace.write(json.dumps(record) + "\n")

        result = play_episode(cfg, args.policy, args.q, args.scenario, spread=spread, on_step=on_step if trace else None)
    finally:
        if trace:
            trace.close()
    print(json.dumps(result.as_row()))
    return 0


def cmd_zonal(args) -> int:
    polys = read_polygons_csv(args.polygons)
    rasters = [(path.stem, read_ascii_grid(path)) for path in args.raster]
    meta = rasters[0][1].metadata
    for name, raster in rasters[1:]:
        if raster.metadata != meta:
            raise WildfireError(f"raster {name} does not share the grid of {rasters[0][0]}")

    if args.intersections and args.intersections.exists():
        ix = load_intersections(args.intersections, polys, meta)
        logger.info(f"Reusing intersections file {args.intersections}")
    else:
        ix = build_intersections(polys, meta)
        if args.intersections:
            save_intersections(ix, args.intersections)

    results = [zonal_stats(ix, raster, layer=name, workers=args.workers) for name, raster in rasters]
    rows = export_covariates(results, args.out, stats=args.stats)
    if args.neighbors:
        pairs = write_neighbors(neighbor_join(polys), args.neighbors)
        logger.info(f"Wrote {pairs} neighbor pairs to {args.neighbors}")
    print(f"{rows} zones, {len(results)} layer(s) -> {args.out}")
    return 0


COMMANDS = {"experiment": cmd_experiment, "simulate": cmd_simulate, "zonal": cmd_zonal}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (WildfireError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
