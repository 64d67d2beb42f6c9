"""Command line scenario runner.

Exit codes: 0 every suite passes, 1 a suite fails, 2 the config does not
parse or validate, 3 the frame fails the good-base bounds, 4 a solver
stage fails.
"""

import argparse
import json
import os
import sys

from .scenarios import (
    BUILTIN_SCENARIOS,
    ConfigError,
    StageError,
    builtin_config,
    load_config,
    run_config,
    validate_config,
    write_outputs,
)

__all__ = ["OUT_ENV", "build_parser", "main", "run_scenario"]

OUT_ENV = "PLANTRANSPORT_OUT"

EXIT_OK, EXIT_SUITE, EXIT_CONFIG, EXIT_VALIDATION, EXIT_SOLVER = 0, 1, 2, 3, 4


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="plantransport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write its report")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON scenario config")
    src.add_argument("--scenario", choices=sorted(BUILTIN_SCENARIOS), help="builtin scenario name")
    run.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    run.add_argument("--threads", type=_positive_int, default=1, help="worker threads for per-curve work")
    run.add_argument("--seed", type=_seed, help="override the plan sampling seed")
    sub.add_parser("list-scenarios", help="list builtin scenarios")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    return parser


def _out_dir(args, cfg):
    if args.out:
        return args.out
    return os.environ.get(OUT_ENV) or os.path.join(cfg["outputs"]["directory"], cfg["name"])


def _print_suites(report):
    for name, suite in report.suites.items():
        value = suite["value"]
        shown = "-" if value is None else f"{value:.3e}"
        limit = "-" if suite["threshold"] is None else f"{suite['threshold']:.1e}"
        print(f"{'PASS' if suite['passed'] else 'FAIL'}  {name:<18} {shown:>11}  <= {limit}")


def run_scenario(cfg, out_dir, threads=1, seed=None):
    """Run a validated config, write outputs into ``out_dir`` and return the exit code."""
    try:
        report = run_config(cfg, n_jobs=threads, seed=seed)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc}", file=sys.stderr)
        if exc.report is not None:
            write_outputs(exc.report, out_dir, ("json",))
        return exc.exit_code
    write_outputs(report, out_dir, cfg["outputs"]["formats"])
    _print_suites(report)
    print(f"report written to {os.path.join(out_dir, 'report.json')}")
    return EXIT_OK if report.passed else EXIT_SUITE


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.command == "list-scenarios":
        for name in sorted(BUILTIN_SCENARIOS):
            print(f"{name}: {BUILTIN_SCENARIOS[name]()['description']}")
        return EXIT_OK
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(json.dumps({"valid": True, "name": cfg["name"]}))
            return EXIT_OK
        cfg = load_config(args.config) if args.config else validate_config(builtin_config(args.scenario))
        return run_scenario(cfg, _out_dir(args, cfg), args.threads, args.seed)
    except ConfigError as exc:
        print(f"error in stage config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error in stage output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
