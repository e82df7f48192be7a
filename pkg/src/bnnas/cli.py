"""Command-line entry point: ``bnnas <command> --config run.json``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import checkpoint
from .pipeline import CKPT, MANIFEST, REPORT, STAGES, ConfigError, StageError, load_config, run_pipeline
from .space import describe_arch, flops, validate_arch
from .indicator import subnet_score


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="train, search, retrain and analyze"))
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run only the {stage} stage"))
    p = sub.add_parser("score", help="BN score and MACs of one architecture from the trained checkpoint")
    _common(p)
    p.add_argument("--arch", required=True, help="comma-separated candidate indices, one per layer")
    _common(sub.add_parser("report", help="print the manifest and search report of a run"))
    return parser


def _score(cfg, arch_text: str) -> str:
    try:
        arch = tuple(int(v) for v in arch_text.split(","))
    except ValueError:
        raise ConfigError(f"--arch must be comma-separated integers, got {arch_text!r}")
    validate_arch(cfg.space, arch)
    path = os.path.join(cfg.out_dir, CKPT)
    if not os.path.exists(path):
        raise StageError("score", f"missing {CKPT}; run the 'train' stage first")
    table = checkpoint.score_table_from_checkpoint(checkpoint.load_checkpoint(path, cfg.space.digest()), cfg.space)
    lines = [f"arch: {','.join(map(str, arch))}",
             f"ops: {describe_arch(arch)}",
             f"bn_score: {subnet_score(table, arch)!r}",
             f"macs: {flops(cfg.space, arch).total}"]
    return "\n".join(lines)


def _report(cfg) -> str:
    parts = []
    for name in (MANIFEST, REPORT):
        path = os.path.join(cfg.out_dir, name)
        if not os.path.exists(path):
            raise StageError("report", f"missing {name} in {cfg.out_dir}")
        with open(path) as f:
            parts.append(f"== {name}\n{f.read()}")
    return "\n".join(parts)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "run":
            manifest = run_pipeline(cfg)
            print(f"run complete in {cfg.out_dir}")
            for k in ("search.best", "retrain.val_accuracy", "analyze.convergence_epoch"):
                if k in manifest:
                    print(f"  {k}: {manifest[k]}")
        elif args.command in STAGES:
            run_pipeline(cfg, [args.command])
            print(f"{args.command} stage complete in {cfg.out_dir}")
        elif args.command == "score":
            print(_score(cfg, args.arch))
        else:
            print(_report(cfg), end="")
    except (StageError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
