"""Command-line entry point: ``patsim <stage> [--config PATH] [--seed N] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import SECTIONS, load_config, section_fields
from .errors import PatsimError


def _flag(section: str, name: str) -> str:
    return f"--{section}-{name}".replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", help="global random seed (overrides [pipeline] seed)")
    common.add_argument("--out", help="artifact directory (overrides [pipeline] out)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for section in SECTIONS:
        group = common.add_argument_group(f"[{section}]")
        for f in section_fields(section):
            group.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}",
                               metavar=f.name.upper(), default=None)

    parser = argparse.ArgumentParser(prog="patsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate synthetic cohorts (events.jsonl, truth.json)",
        "embed": "split patients and train concept embeddings",
        "represent": "write temporal patient matrices",
        "sim": "score test-patient pairs (rv, dcor or cnn)",
        "train": "train the convolutional matcher",
        "cluster": "cluster test patients",
        "eval": "write clustering metrics",
        "sweep": "vary one of d, w, m and report metrics per value",
        "pathways": "export event-transition counts for one cohort",
    }
    for name in pipeline.STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def config_from_args(args: argparse.Namespace):
    overrides: dict[str, dict[str, str]] = {}
    for key, value in vars(args).items():
        if value is None or "." not in key:
            continue
        section, name = key.split(".", 1)
        overrides.setdefault(section, {})[name] = value
    top = {k: getattr(args, k) for k in ("seed", "out") if getattr(args, k) is not None}
    return load_config(args.config, overrides, top)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        for path in pipeline.STAGES[args.command](config):
            print(path)
    except PatsimError as exc:
        print(f"patsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
