"""Command line entry point: ``cnnevo evolve | report | energy``."""

import argparse
import logging
import sys

from . import harness
from .errors import ConfigError, FormatError


def _fx_mode(args, default):
    if args.fx_bits is None and args.fx_frac is None:
        return default
    return f"fx:{args.fx_bits or 16},{args.fx_frac if args.fx_frac is not None else 8}"


def build_parser():
    parser = argparse.ArgumentParser(prog="cnnevo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run neuroevolution from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--fx-bits", type=int)
    p.add_argument("--fx-frac", type=int)
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    p = sub.add_parser("report", help="evaluate a genome checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run config whose data settings define the split")
    p.add_argument("--dataset", choices=sorted(harness.DATASET_DEFAULTS))
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--subsample-n", type=int)
    p.add_argument("--mode", default="fp", help="fp, fx16 or fx:N,F")
    p.add_argument("--fx-bits", type=int)
    p.add_argument("--fx-frac", type=int)
    p.add_argument("--baseline-params", type=int)

    p = sub.add_parser("energy", help="estimate the multiplication-energy reduction")
    p.add_argument("--orig", type=int, required=True)
    p.add_argument("--red", type=int, required=True)
    p.add_argument("--mode", default="fp")
    p.add_argument("--c1", type=float, default=2.4)
    return parser


def _overrides(pairs):
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in harness._FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = harness._parse_value(key, value)
    return values


def cmd_evolve(args):
    try:
        overrides = _overrides(args.set)
        mode = _fx_mode(args, None)
        if mode:
            overrides["numeric_mode"] = mode
        cfg = harness.load_config(args.config, overrides)
    except (ConfigError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(harness.dump_config(cfg))
        return harness.EXIT_OK
    return harness.run(cfg)


def cmd_report(args):
    try:
        values = {}
        if args.config:
            values = harness.load_config(args.config).__dict__.copy()
        for key in ("dataset", "data_dir", "seed", "subsample_n"):
            if getattr(args, key) is not None:
                values[key] = getattr(args, key)
        cfg = harness.RunConfig(**values)
        mode = _fx_mode(args, args.mode)
    except (ConfigError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    try:
        split = harness.load_split(cfg)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_DATA
    try:
        rep = harness.report(args.checkpoint, split, mode, args.baseline_params)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_DATA
    sys.stdout.write(harness.format_report(rep))
    return harness.EXIT_OK


def cmd_energy(args):
    try:
        value = harness.estimate_emult_reduction(args.orig, args.red, args.mode, harness.EnergyModel(args.c1))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    print(f"{value:.2f}")
    return harness.EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return {"evolve": cmd_evolve, "report": cmd_report, "energy": cmd_energy}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
