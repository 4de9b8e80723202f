"""Command line entry point: ``iab-route-lab <command> [options]``."""
from __future__ import annotations

import argparse
import sys

from .config import ALGORITHMS, EXTRA_ALGORITHMS, ExperimentConfig, default_config_text, parse_config
from .errors import AuditMismatch, BadWindow, ConfigError
from .harness import run_experiment

SCENARIO_COMMANDS = {"run": None, "sweep": "sweep", "burst": "burst", "failure": "failure",
                     "mobility": "mobility", "converge": "converge"}
# full replication counts: ten seeds over five topologies
FULL_SEEDS = tuple(range(10))
FULL_TOPOLOGIES = tuple(range(5))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iab-route-lab",
                                 description="Packet routing experiments on IAB networks.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SCENARIO_COMMANDS:
        p = sub.add_parser(name, help=f"{name} experiment")
        p.add_argument("--config", help="experiment config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--algorithm", choices=ALGORITHMS + EXTRA_ALGORITHMS)
        p.add_argument("--slots", type=int, help="slots per run (per load point in a sweep)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--full", action="store_true",
                       help="10 seeds x 5 topologies instead of the desk-scale counts")
    c = sub.add_parser("config", help="print the default config file")
    c.add_argument("--out", help="write to this file instead of stdout")
    return ap


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if SCENARIO_COMMANDS[args.command] is not None:
        cfg.scenario.kind = SCENARIO_COMMANDS[args.command]
    if args.algorithm:
        cfg.experiment.algorithm = args.algorithm
    if args.slots is not None:
        cfg.experiment.slots = args.slots
    if args.out:
        cfg.experiment.out_dir = args.out
    if args.full:
        cfg.experiment.seeds = FULL_SEEDS
        cfg.experiment.topology_seeds = FULL_TOPOLOGIES
    if args.seed is not None:
        cfg.experiment.seeds = (args.seed,)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        text = default_config_text()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
        return 0
    try:
        cfg = _load(args)
        results = run_experiment(cfg)
    except (ConfigError, BadWindow) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AuditMismatch as exc:
        print(f"audit mismatch: {exc}", file=sys.stderr)
        return 3
    for r in results:
        print(f"t{r.topology_seed} s{r.seed} {r.label}: delay={r.avg_delay:.3f} "
              f"ratio={r.arrival_ratio:.4f} dropped={r.dropped}")
    print(f"wrote {cfg.experiment.out_dir}/summary.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
