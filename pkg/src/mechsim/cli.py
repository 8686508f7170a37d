"""Command line entry point: ``mechsim run|validate|list-experiments``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import EXPERIMENTS, ConfigError, dump_config, load_config

EXIT_CONFIG = 2
EXIT_SIMULATION = 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mechsim", description="Run mechanism simulations from a JSON config.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (MECHSIM_OUT overrides)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
    val = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    val.add_argument("config")
    sub.add_parser("list-experiments", help="list available experiments")
    return p


def _config_errors(exc: ConfigError) -> int:
    for line in exc.errors:
        print(f"config error: {line}", file=sys.stderr)
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-experiments":
        for name, desc in EXPERIMENTS.items():
            print(f"{name}\t{desc}")
        return 0
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _config_errors(exc)
    if args.command == "validate":
        print(json.dumps(dump_config(cfg), indent=2, sort_keys=True))
        return 0

    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    if args.jobs < 1:
        return _config_errors(ConfigError(["--jobs: must be at least 1"]))
    out = os.environ.get("MECHSIM_OUT") or args.out or cfg.out or "mechsim-out"
    from .experiments import run_experiment

    try:
        result = run_experiment(cfg, out, jobs=args.jobs)
    except Exception as exc:  # noqa: BLE001 - reported with context and a non-zero status
        print(f"simulation error in experiment {cfg.experiment}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    print(f"{cfg.experiment}: {len(result.results)} cells written to {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
