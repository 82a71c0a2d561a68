"""Command-line entry point: one subcommand per pipeline stage plus
`pipeline` to chain them all.

Every subcommand accepts --config/--seed/--out/--jobs; the output root
falls back to the SEGVAR_OUT environment variable, then ./segvar-out.
Failures print one machine-readable JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, load_experiment_config
from .errors import SegvarError

STAGES = {
    "synth": pipeline.run_synth,
    "preprocess": pipeline.run_preprocess,
    "split": pipeline.run_split,
    "train": pipeline.run_train,
    "predict": pipeline.run_predict,
    "biasvar": pipeline.run_biasvar,
    "evaluate": pipeline.run_evaluate,
    "render": pipeline.run_render,
    "pipeline": pipeline.run_pipeline,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segvar",
        description="Measure and reduce the model variance of segmentation learners.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", metavar="PATH", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", metavar="DIR", help="output root directory")
        p.add_argument("--jobs", type=int, help="worker parallelism bound")
    return parser


def resolve_config(args):
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    out = args.out or cfg.out_dir or os.environ.get("SEGVAR_OUT") or "segvar-out"
    return cfg, Path(out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg, out = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        STAGES[args.command](cfg, out)
    except SegvarError as exc:
        line = json.dumps(
            {"error": type(exc).__name__, "stage": args.command, "message": str(exc)}
        )
        print(line, file=sys.stderr)
        return 1
    except ValueError as exc:
        line = json.dumps(
            {"error": "ValueError", "stage": args.command, "message": str(exc)}
        )
        print(line, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
