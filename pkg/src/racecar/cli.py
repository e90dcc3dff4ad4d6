"""Command line driver: ``racecar run <config>`` and ``racecar compare <a> <b>``."""
import argparse
import sys

from .exceptions import ConfigError, ContractError, RacecarError
from .experiments import compare_summaries, parse_config, parse_seeds, run_experiment


def build_parser():
    p = argparse.ArgumentParser(prog="racecar", description="Run racecar-training experiments and compare their summaries.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (model, seed) of an experiment config")
    run.add_argument("config", help="key = value experiment file")
    run.add_argument("--out", help="output directory (overrides the config's 'out')")
    run.add_argument("--seeds", help="seed range N..M or comma list (overrides the config)")
    run.add_argument("-q", "--quiet", action="store_true", help="no progress lines")

    cmp_ = sub.add_parser("compare", help="compare two summary.csv files")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--model-a", help="model rows to use from A")
    cmp_.add_argument("--model-b", help="model rows to use from B")
    return p


def _run(args):
    try:
        cfg = parse_config(args.config)
        if args.seeds:
            cfg.seeds = parse_seeds(args.seeds)
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        run_experiment(cfg, args.out, progress)
    except (RacecarError, FloatingPointError, OSError) as exc:
        model, seed = getattr(exc, "model", "?"), getattr(exc, "seed", "?")
        print(f"error in experiment={cfg.experiment} model={model} seed={seed}: {exc}", file=sys.stderr)
        return 1
    return 0


def _compare(args):
    try:
        report, _ = compare_summaries(args.a, args.b, args.model_a, args.model_b)
    except (ContractError, OSError) as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(report)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    return _compare(args)


if __name__ == "__main__":
    sys.exit(main())
