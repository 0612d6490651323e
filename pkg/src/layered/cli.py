"""
Command-line interface for the layered control experiments.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import LayeredError
from .experiments import build_config, configure_logging, load_config, run_command


def _parse_args(argv):
    p = argparse.ArgumentParser(prog="layered", description="Layered planning/tracking experiments (CSV artifacts)")
    p.add_argument("--log-file", type=str, default=None, help="Path to a rotating log file")
    p.add_argument("--quiet", action="store_true", help="Do not log to stderr")

    sub = p.add_subparsers(dest="cmd", required=True)

    def _common(parser):
        parser.add_argument("--config", "-c", type=str, default=None, help="Path to a JSON config")
        parser.add_argument("--seed", type=int, default=None, help="Base seed (default: 0)")
        parser.add_argument("--out-dir", type=str, default=None, help="Output directory (default: results)")
        parser.add_argument("--systems", type=int, default=None, help="Number of sampled systems")
        parser.add_argument("--oracle-tracking", action="store_true",
                            help="Use the exact tracking controller instead of the learned one")
        return parser

    _common(sub.add_parser("verify-theory", help="Check closed-form identities and dual-learning traces"))
    _common(sub.add_parser("lqr-table", help="Learned pipeline vs. no-dual baseline on random LQR systems"))
    _common(sub.add_parser("rho-sweep", help="Learned pipeline across penalty values"))
    _common(sub.add_parser("clqr", help="State-constrained LQR with an MLP dual map"))

    return p.parse_args(argv)


def main(argv=None):
    args = _parse_args(sys.argv[1:] if argv is None else argv)

    log_path = Path(args.log_file) if args.log_file else None
    logger = configure_logging(log_path, verbose=not args.quiet)

    try:
        file_values = load_config(Path(args.config)) if args.config else {}
    except (OSError, LayeredError) as e:
        print(f"Failed to read config: {e}", file=sys.stderr)
        return 1

    overrides = {
        "seed": args.seed,
        "output_path": args.out_dir,
        "n_systems": args.systems,
        "oracle_tracking": True if args.oracle_tracking else None,
    }
    try:
        config = build_config(args.cmd, file_values, overrides)
        result = run_command(args.cmd, config)
    except LayeredError as e:
        print(f"{args.cmd} failed: {e}", file=sys.stderr)
        return 1

    for path in result.paths:
        logger.info("Wrote %s", path)
    if result.failures:
        print(f"{result.failures} check(s) failed; see {config.out_dir}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
