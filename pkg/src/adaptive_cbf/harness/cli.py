"""``adaptive-cbf`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig, load_config
from .experiments import COMMANDS, configure_logging

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-cbf", description="Adaptive barrier-function RL experiments.")
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in COMMANDS:
        s = sub.add_parser(mode)
        s.add_argument("--config", help="INI file with [experiment], [train], [sweep], ... sections")
        s.add_argument("--seed", type=int)
        s.add_argument("--env", choices=("nav", "race"))
        s.add_argument("--out", help="output directory")
        s.add_argument("--steps", type=int, help="total environment steps (train.total_steps)")
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="section.key=value, repeatable")
        if mode in ("eval", "ablate", "generalize"):
            s.add_argument("--checkpoint")
        if mode == "train":
            s.add_argument("--resume", help="checkpoint to continue from")
    return p


def resolve(args) -> ExperimentConfig:
    overrides = list(args.override)
    cfg = load_config(args.config, overrides)
    cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    if args.env is not None:
        cfg.env = args.env
    if args.out is not None:
        cfg.out = args.out
    if args.steps is not None:
        cfg.train.total_steps = args.steps
    if getattr(args, "checkpoint", None):
        getattr(cfg, args.mode).checkpoint = args.checkpoint
    if getattr(args, "resume", None):
        cfg.resume = args.resume
    return cfg.validate()


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"adaptive-cbf: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[cfg.mode](cfg)
    except (ValueError, FileNotFoundError, PermissionError) as exc:
        print(f"adaptive-cbf: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
