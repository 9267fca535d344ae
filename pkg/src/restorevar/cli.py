"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
failure (non-finite values, missing files or checkpoints). Failures print a
single diagnostic line to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.io import FormatError
from .autodiff.ops import ConfigError, ShapeError
from .autodiff.tensor import NonFiniteError
from .config import RunConfig, load_config

log = logging.getLogger("restorevar")

COMMANDS = ("gen-data", "train-codec", "train-var", "train-lrt", "finetune-decoder",
            "restore", "eval", "ablate", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar=type(f.default).__name__.upper(),
                       help=f"(default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="restorevar", description="Scale-space autoregressive image restoration toolkit.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "gen-data": "generate the procedural train/val/test corpus and manifest",
        "train-codec": "train the multi-scale VQ autoencoder",
        "train-var": "train the scale-AR transformer (codec frozen)",
        "train-lrt": "train the latent refiner (codec and transformer frozen)",
        "finetune-decoder": "fine-tune the decoder on continuous latents",
        "restore": "restore one degraded PPM image",
        "eval": "evaluate the pipeline on a split and write a CSV report",
        "ablate": "compare refiner variants on the test split",
        "selftest": "run the invariant suite",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        if name != "selftest":
            _add_config_flags(p)
        else:
            p.add_argument("--seed", type=int, default=0)
        if name == "train-lrt":
            p.add_argument("--variant", choices=("lrt", "lrt_noz"), default="lrt",
                           help="lrt uses backbone hidden states; lrt_noz omits them")
        if name == "restore":
            p.add_argument("--input", required=True, help="degraded PPM image")
            p.add_argument("--output", required=True, help="restored PPM image")
        if name == "eval":
            p.add_argument("--report", help="CSV output path (default <out_dir>/report.csv)")
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "ablate":
            p.add_argument("--report", help="CSV output path (default <out_dir>/ablation.csv)")
    return parser


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _run(args) -> int:
    from . import pipeline
    from .data import read_ppm, write_ppm
    from .metrics import table_csv

    if args.command == "selftest":
        from .selftest import run_selftest

        return 0 if run_selftest(args.seed) else 3

    cfg = _config(args)
    cmd = args.command
    if cmd == "gen-data":
        pipeline.gen_data(cfg)
    elif cmd == "train-codec":
        pipeline.stage_codec(cfg)
    elif cmd == "train-var":
        pipeline.stage_transformer(cfg)
    elif cmd == "train-lrt":
        pipeline.stage_refiner(cfg, args.variant)
    elif cmd == "finetune-decoder":
        pipeline.stage_finetune(cfg)
    elif cmd == "restore":
        src = Path(args.input)
        if not src.exists():
            raise FileNotFoundError(f"input image not found: {src}")
        img = read_ppm(src)

        def step_log(k, size):
            log.info("ar step %d/%d scale %dx%d", k, restorer.codec.schedule.K, *size)

        restorer = pipeline.build_restorer(cfg, step_log=step_log)
        out = restorer(img[None])[0]
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        write_ppm(args.output, out)
        log.info("wrote %s", args.output)
    elif cmd == "eval":
        report = args.report or str(Path(cfg.out_dir) / "report.csv")
        rows = pipeline.run_eval(cfg, report, split=args.split)
        sys.stdout.write(table_csv(rows))
    elif cmd == "ablate":
        report = args.report or str(Path(cfg.out_dir) / "ablation.csv")
        results = pipeline.run_ablation(cfg, report)
        for variant, rows in results.items():
            sys.stdout.write(f"{variant},{rows[-1]['psnr']:.4f},{rows[-1]['ssim']:.6f}\n")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .pipeline import StageError

    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose one of {', '.join(COMMANDS)}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return _run(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FileNotFoundError, StageError, FormatError, ValueError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("runtime error: interrupted", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
