"""Command-line entry point: ``quped --mode quped --config presets/synthetic_fp.cfg``."""
from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError
from .config import FIELDS, describe_fields, parse_config, serialize
from .runner import EXIT_CONFIG, run


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quped", description="Quantized personalized federated learning simulator.")
    p.add_argument("--config", help="config file (key = value lines with [sections])")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--help-config", action="store_true", help="list every config key with its default")
    for key, (section, _, _, _, doc) in FIELDS.items():
        p.add_argument(f"--{key}", dest=key, metavar="VALUE", help=f"[{section}] {doc}")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.help_config:
        print(describe_fields())
        return 0
    overrides = {k: getattr(args, k) for k in FIELDS if getattr(args, k) is not None}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(serialize(cfg), end="")
        return 0
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
