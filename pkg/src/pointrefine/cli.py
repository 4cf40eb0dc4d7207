"""Command-line driver for the experiment stages."""
from __future__ import annotations

import argparse
import sys

from .config import load_config
from .pipeline import (
    PIPELINE_STAGES,
    StageError,
    run_pipeline,
    stage_visualize,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointrefine",
        description="Coarse-point refinement and point localization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stage_names = [name for name, _ in PIPELINE_STAGES]
    for name in stage_names + ["pipeline", "visualize"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "pipeline":
            p.add_argument(
                "--skip-refine",
                action="store_true",
                help="train the localizer on the raw coarse points",
            )
        if name == "visualize":
            p.add_argument(
                "--kind",
                default="refined-points",
                choices=["heatmaps", "refined-points", "predictions"],
            )
            p.add_argument("--ids", type=int, nargs="*", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out_dir": args.out}
    if getattr(args, "skip_refine", False):
        overrides["skip_refine"] = True
    try:
        cfg = load_config(args.config, overrides)
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    stages = dict(PIPELINE_STAGES)
    try:
        if args.command == "pipeline":
            manifest = run_pipeline(cfg)
            print(f"pipeline complete; manifest at {cfg.out_dir}/manifest.json")
            for stage, secs in manifest.seconds.items():
                print(f"  {stage}: {secs:.1f}s")
        elif args.command == "visualize":
            written = stage_visualize(cfg, args.kind, args.ids)
            print(f"wrote {len(written)} file(s)")
        else:
            artifacts = stages[args.command](cfg)
            for key, path in artifacts.items():
                print(f"{key}: {path}")
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:
        print(f"stage {args.command!r} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
