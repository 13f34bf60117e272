"""Command-line entry points: train, eval, resume, sweep."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import trainer


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = trainer.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    artifacts = trainer.run_training(cfg)
    report = artifacts.final_report
    print(f"checkpoint: {artifacts.checkpoint_path}")
    print(f"metrics:    {artifacts.metrics_path}")
    if report is not None:
        print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = trainer.run_eval(args.checkpoint, args.trials)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def _cmd_resume(args: argparse.Namespace) -> int:
    artifacts = trainer.resume(
        args.checkpoint,
        extra_epochs=args.epochs,
        pos_sampling=args.pos_sampling,
        output_dir=args.out,
    )
    print(f"checkpoint: {artifacts.checkpoint_path}")
    if artifacts.final_report is not None:
        print(json.dumps(artifacts.final_report.as_dict(), sort_keys=True))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    with open(args.grid, "rb") as fh:
        data = tomllib.load(fh)
    grid = data.pop("grid", {})
    base_cfg = trainer.config_from_dict(data)
    out = Path(args.out) if args.out is not None else Path(base_cfg.output_dir)
    summary = trainer.run_sweep(base_cfg, grid, out)
    print(f"summary: {summary}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sspslab",
        description="Train and evaluate desk-scale self-supervised speaker encoders "
        "with ssl / ssps / supervised positive sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="TOML config path")
    p_train.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_train.add_argument("--out", default=None, help="override the output directory")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against a trial list")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--trials", required=True, help="trial list file (label a b per line)")
    p_eval.set_defaults(func=_cmd_eval)

    p_resume = sub.add_parser("resume", help="continue training from a checkpoint")
    p_resume.add_argument("--checkpoint", required=True)
    p_resume.add_argument(
        "--pos-sampling", choices=list(trainer.POS_SAMPLING), default=None,
        help="switch the positive sampling mode on resume",
    )
    p_resume.add_argument("--epochs", type=int, required=True, help="additional epochs")
    p_resume.add_argument("--out", default=None, help="output directory for the resumed run")
    p_resume.set_defaults(func=_cmd_resume)

    p_sweep = sub.add_parser("sweep", help="run a comparison grid and write summary.csv")
    p_sweep.add_argument(
        "--grid", required=True,
        help="config file with an extra [grid] section listing the axes to vary",
    )
    p_sweep.add_argument("--out", default=None, help="output directory for the sweep")
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
