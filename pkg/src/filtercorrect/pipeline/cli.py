"""Command-line entry point: one subcommand per experiment stage."""

from __future__ import annotations

import argparse
import logging
import sys

from ..nn.optim import ConfigError
from .config import RUN_ALL, STAGES, ExperimentConfig
from .data import DatasetError, make_synthetic_bundle
from .stages import PipelineError, Run


def build_parser():
    p = argparse.ArgumentParser(prog="filtercorrect", description="Distortion correction experiment pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("all",):
        sp = sub.add_parser(stage, help="run every stage in order" if stage == "all" else f"run the {stage} stage")
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--stage-seed", type=int, default=None, help="override the derived stage seed")
        sp.add_argument("--out", default=None, help="output directory (default: config 'output')")
    sp = sub.add_parser("make-synthetic", help="write the procedural 10-class dataset as IDX files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, default=10000)
    sp.add_argument("--val", type=int, default=1000)
    sp.add_argument("--test", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
    )
    try:
        if args.command == "make-synthetic":
            path = make_synthetic_bundle(args.out, args.train, args.val, args.test, args.seed)
            print(path)
            return 0
        run = Run(ExperimentConfig.load(args.config), args.out, args.stage_seed)
        stages = RUN_ALL if args.command == "all" else (args.command,)
        for stage in stages:
            run.run(stage)
            print(f"{stage}: done -> {run.out}")
        if "report" in stages:
            print((run.out / "report.txt").read_text(encoding="utf-8"), end="")
    except (ConfigError, DatasetError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
