"""Command-line entry point.

    chipqkd <subcommand> [--config FILE] [--set section.key=value ...] [--out DIR] [--seed N]

Exit codes: 0 success, 2 configuration error, 3 invariant failure.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import default_ini, load_config
from .errors import ConfigError
from .experiments import RUNNERS, InvariantFailure

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chipqkd", description="Chip-based decoy-state BB84 link simulator.")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "calibrate": "iterative state calibration; trajectory and R_err landscape CSVs",
        "skr-curve": "secret key rate versus distance",
        "stability": "repeated key blocks with drift and SPGD compensation",
        "mc-vs-analytic": "Monte-Carlo blocks against expected tallies",
        "spgd-demo": "polarization drift compensation trace",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, help="random seed (overrides protocol.seed)")
    p = sub.add_parser("show-config", help="print the default configuration as INI")
    return ap


def _print_report(name: str, report: dict) -> None:
    if "table" in report:
        print(report["table"])
    for k, v in report.items():
        if k in ("table", "summary"):
            continue
        if k == "points":
            print("distance_km  skr_bps  qber_z")
            for d, s, q in v:
                print(f"{d:g}  {s:.6g}  {q:.4g}")
            continue
        print(f"{k}: {v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "show-config":
        print(default_ini())
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    print(f"# config_hash={cfg.hash()} seed={cfg.protocol.seed}")
    try:
        report = RUNNERS[args.command](cfg, args.out)
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_report(args.command, report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
