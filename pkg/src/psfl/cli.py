"""Command line: ``psfl run``, ``psfl validate``, ``psfl compare``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import parse_config
from .errors import ConfigError, PSFLError
from .runner import compare_runs, run_experiment, write_comparison

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("psfl")


def _parser():
    p = argparse.ArgumentParser(prog="psfl", description="Federated semantic-communication simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="artifact directory (overrides run.output_dir)")
    v = sub.add_parser("validate", help="check a config and print the effective settings")
    v.add_argument("config")
    c = sub.add_parser("compare", help="align round ledgers of finished runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("-o", "--output", help="write the comparison CSV here instead of stdout")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            cfg = parse_config(args.config)
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        if args.command == "run":
            cfg = parse_config(args.config)
            out = run_experiment(cfg, args.output)
            print(out)
            return EXIT_OK
        columns, rows = compare_runs(args.dirs)
        if args.output:
            with open(args.output, "w", encoding="utf-8", newline="") as f:
                write_comparison(columns, rows, f)
        else:
            write_comparison(columns, rows, sys.stdout)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PSFLError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
