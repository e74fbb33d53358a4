"""Command-line front end: run seeded simulations, write CSVs, compare outputs."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .engine import InvariantError
from .metrics import ccdf, write_ccdf_csv
from .scenario import ScenarioError, parse_scenario
from .simulation import Simulation

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVARIANT = 2

SCHEDULER_RANK = {"lowrtt": 0, "cwr": 1, "cwr_red": 2}


def _run_dir(outdir: Path, rep: int) -> Path:
    return outdir / f"run_{rep:03d}"


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        config = parse_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        config.seed = args.seed
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    pooled_mcts: list[int] = []
    try:
        for rep in range(args.reps):
            rep_config = replace(config, seed=config.seed + rep,
                                 paths=list(config.paths),
                                 sources=list(config.sources))
            result = Simulation(rep_config).run()
            for warning in result.write_outputs(_run_dir(outdir, rep)):
                print(f"run {rep}: {warning}", file=sys.stderr)
            pooled_mcts.extend(result.priority_mcts())
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    write_ccdf_csv(outdir / "ccdf.csv", ccdf(pooled_mcts))
    print(f"wrote {args.reps} run(s) under {outdir}")
    return EXIT_OK


def _load_growth(outdir: Path) -> list[tuple[int, str, float]]:
    rows = []
    for run_dir in sorted(outdir.glob("run_*")):
        growth = run_dir / "cwnd_growth.csv"
        if not growth.exists():
            continue
        with growth.open() as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["path_id"]), row["scheduler"],
                             float(row["mean_growth_bytes_per_rtt"])))
    return rows


def _scheduler_of(outdir: Path) -> str | None:
    for run_dir in sorted(outdir.glob("run_*")):
        manifest = run_dir / "manifest.json"
        if manifest.exists():
            with manifest.open() as fh:
                return json.load(fh)["config"]["path_scheduler"]
    return None


def cmd_compare(args: argparse.Namespace) -> int:
    by_scheduler: dict[str, dict[int, list[float]]] = {}
    for raw in args.dirs:
        outdir = Path(raw)
        scheduler = _scheduler_of(outdir)
        if scheduler is None:
            print(f"error: {outdir}: no manifest.json found", file=sys.stderr)
            return EXIT_USAGE
        per_path = by_scheduler.setdefault(scheduler, {})
        for path_id, _sched, growth in _load_growth(outdir):
            per_path.setdefault(path_id, []).append(growth)

    print("mean congestion-window growth per RTT (bytes)")
    means: dict[str, dict[int, float]] = {}
    for scheduler in sorted(by_scheduler, key=lambda s: SCHEDULER_RANK.get(s, 99)):
        means[scheduler] = {}
        for path_id in sorted(by_scheduler[scheduler]):
            values = by_scheduler[scheduler][path_id]
            mean = sum(values) / len(values)
            means[scheduler][path_id] = mean
            print(f"  {scheduler:8s} path {path_id}: {mean:8.1f}  "
                  f"({len(values)} run(s))")

    ranked = [s for s in ("lowrtt", "cwr", "cwr_red") if s in means]
    if len(ranked) >= 2:
        holds = True
        path_ids = sorted(set.intersection(
            *(set(means[s]) for s in ranked)))
        for path_id in path_ids:
            series = [means[s][path_id] for s in ranked]
            if any(a < b for a, b in zip(series, series[1:])):
                holds = False
        print(f"growth ordering ({' >= '.join(ranked)} per path): "
              f"{'holds' if holds else 'violated'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwrsim",
        description="Deterministic two-path transport simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario file")
    sim.add_argument("scenario", help="scenario file (key = value format)")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    sim.add_argument("--reps", type=int, default=1,
                     help="repetitions with seeds seed, seed+1, ...")
    sim.add_argument("--out", default="out", help="output directory")
    sim.set_defaults(fn=cmd_simulate)

    cmp_ = sub.add_parser("compare", help="compare simulate output directories")
    cmp_.add_argument("dirs", nargs="+", help="output directories to compare")
    cmp_.set_defaults(fn=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
