"""Command-line entry point: ``robustleak <command> --config cfg.json --out dir``."""

import argparse
import logging
import sys
from dataclasses import replace

from .exceptions import ConfigError
from .experiments import COMMANDS, emit_report, execute, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="robustleak",
                                     description="Membership-leakage audits of robust classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, action="append",
                       help="seed to run; repeat for several (overrides seeds)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed:
            cfg = replace(cfg, seeds=args.seed)
        out = args.out or cfg.output_dir
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        for seed in cfg.seeds:
            for path in emit_report(execute(cfg, args.command, seed), out):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001  (any runtime failure maps to exit 1)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
