"""Command-line entry point for the experiment pipeline."""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline

# how far each subcommand advances the pipeline
_STAGES = {
    "train-victim": "train_victim",
    "poison": "poison",
    "recover": "recover",
    "unlearn": "unlearn",
    "eval": "evaluate",
    "run": "report",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults apply otherwise)")
    parser.add_argument("--seed", type=int, help="global seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path config override")


def _build_config(args: argparse.Namespace) -> dict:
    overrides = pipeline.parse_overrides(args.override)
    cfg = pipeline.load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backdoorlab",
        description="Backdoor injection, trigger recovery and unlearning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGES:
        p = sub.add_parser(name, help=f"run the pipeline through the {name} stage")
        _add_common(p)
    p = sub.add_parser("sweep", help="grid sweep over one experiment axis")
    p.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    _add_common(p)
    p = sub.add_parser("make-standin",
                       help="generate the bundled stand-in digits IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--train-size", type=int, default=10000)
    p.add_argument("--test-size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    if args.command == "make-standin":
        from .standin import make_digits_standin
        paths = make_digits_standin(args.out, args.train_size, args.test_size, args.seed)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
        return 0

    cfg = _build_config(args)
    if args.command == "sweep":
        rows = pipeline.sweep(cfg, args.axis)
        print(json.dumps(rows, indent=2))
        return 1 if any("error" in r for r in rows) else 0

    run = pipeline.PipelineRun(cfg)
    try:
        if args.command == "train-victim":
            run.stage_train_victim()
        elif args.command == "poison":
            run.stage_poison()
        elif args.command == "recover":
            pool = run.stage_recover()
            print(f"recovered {len(pool)} trigger(s)")
        elif args.command == "unlearn":
            purified, _ = run.stage_unlearn()
            if purified is None:
                print("no trigger recovered; unlearning skipped", file=sys.stderr)
        elif args.command in ("eval", "run"):
            report = run.stage_evaluate()
            pipeline.emit_report(report, run.out)
            print(report.to_json())
    except pipeline.StageError as e:
        print(str(e), file=sys.stderr)
        if args.command in ("eval", "run"):
            run.report.errors.append({"stage": e.stage, "message": str(e)})
            pipeline.emit_report(run.report, run.out)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
