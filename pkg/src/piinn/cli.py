"""Command line entry point: ``piinn <subcommand> --config cfg.json --seed N --out DIR``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import EXPERIMENTS, ConfigError, ExperimentConfig
from .runner import STAGES, Run, StageError, report, run_experiment

COMMANDS = ("gen-data", "train", "invert", "mcmc", "abc", "evaluate", "sweep", "report", "run")


def _load_config(args):
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if args.experiment:
        doc["experiment"] = args.experiment
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.reduced:
        doc["reduced"] = True
    if "experiment" not in doc:
        raise ConfigError("give --config or --experiment (one of %s)" % ", ".join(EXPERIMENTS))
    return ExperimentConfig.from_dict(doc)


def build_parser():
    ap = argparse.ArgumentParser(prog="piinn", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="experiment config JSON")
    ap.add_argument("--experiment", choices=EXPERIMENTS, help="use built-in defaults")
    ap.add_argument("--seed", type=int, help="master seed (u64)")
    ap.add_argument("--out", help="output root directory")
    ap.add_argument("--reduced", action="store_true", help="reduced-scale preset")
    ap.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            rows = report(args.out or "runs")
            print("%d metric rows written to %s/report.csv" % (len(rows), args.out or "runs"))
            return 0
        cfg = _load_config(args)
        if args.show_config:
            print(cfg.dumps())
            return 0
        if args.command == "run":
            run = run_experiment(cfg)
        else:
            run = Run(cfg)
            run.stage(args.command, STAGES[args.command], run)
    except (ConfigError, StageError, FileNotFoundError) as exc:
        print("piinn: error: %s" % exc, file=sys.stderr)
        return 2
    print(run.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
