"""Command line entry point: ``mbsense <simulate|train|pretrain|finetune|eval|sweep>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import SWEEP_AXES, ExperimentConfig, apply_overrides, load_config



def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON file (default: <out>/config.json if present, else built-in defaults)")
    p.add_argument("--seed", type=int, help="run seed; overrides the config and every training seed")
    p.add_argument("--out", help="run directory (default: config output_dir or runs/<name>)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set train.epochs=50 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbsense", description="Multi-band Wi-Fi sensing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate train/test datasets and calibration statistics")
    _common(p)
    p = sub.add_parser("train", help="supervised training on the labeled fraction")
    _common(p)
    p = sub.add_parser("pretrain", help="autoencoder pretraining on all training data")
    _common(p)
    p.add_argument("--pool", action="append", default=[], metavar="DATASET_DIR",
                   help="extra dataset directory pooled (unlabeled) into pretraining")
    p = sub.add_parser("finetune", help="freeze encoders and fine-tune a new head")
    _common(p)
    p.add_argument("--pretrained", help="pretrained checkpoint directory (default: <out>/checkpoints/pretrained)")
    p = sub.add_parser("eval", help="confusion matrix and accuracy on the test split")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: finetuned, else supervised)")
    p.add_argument("--dataset", help="dataset directory (default: <out>/dataset/test)")
    p.add_argument("--latents", action="store_true", help="also write metrics/latents.csv")
    p = sub.add_parser("sweep", help="run one experiment grid and write a summary table")
    _common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Config file, else the run directory's echo, else defaults; then overrides and seed."""
    if args.config:
        cfg = load_config(args.config)
    elif args.out and (Path(args.out) / "config.json").exists():
        cfg = load_config(Path(args.out) / "config.json")
    else:
        cfg = ExperimentConfig()
    cfg = apply_overrides(cfg, args.overrides)
    if getattr(args, "pool", None):
        cfg.pool_datasets = tuple(cfg.pool_datasets) + tuple(args.pool)
    if args.seed is not None:
        if args.seed < 0:
            raise ValueError("--seed must be nonnegative")
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def run(args) -> int:
    cfg = resolve_config(args)
    root = pipeline.run_dir(cfg, args.out)
    cmd = args.command
    if cmd == "simulate":
        pipeline.write_run_info(cfg, root, cmd)
        out = pipeline.simulate(cfg, root)
        print(f"dataset written to {out}")
    elif cmd == "train":
        out = pipeline.train(cfg, root)
        pipeline.write_run_info(cfg, root, cmd)
        print(f"checkpoint written to {out}")
    elif cmd == "pretrain":
        out = pipeline.pretrain(cfg, root)
        pipeline.write_run_info(cfg, root, cmd)
        print(f"checkpoint written to {out}")
    elif cmd == "finetune":
        out = pipeline.finetune(cfg, root, args.pretrained)
        pipeline.write_run_info(cfg, root, cmd)
        print(f"checkpoint written to {out}")
    elif cmd == "eval":
        summary = pipeline.evaluate(cfg, root, args.checkpoint, args.dataset, args.latents)
        pipeline.write_run_info(cfg, root, cmd)
        print(json.dumps({"average_accuracy": summary["average_accuracy"]}))
    elif cmd == "sweep":
        workers = pipeline.worker_count(args.jobs)
        pipeline.write_run_info(cfg, root, cmd)
        out = pipeline.sweep(cfg, root, args.axis, workers)
        print(f"summary written to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
