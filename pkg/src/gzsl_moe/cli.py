"""Command-line entry point: ``gzsl-moe <command> [options]``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 training
divergence or missing prerequisite checkpoint, 64 usage error, 65 malformed
input data, 66 missing input file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import BACKEND, __version__
from .classifier import infer_frame
from .data import FrameFormatError, load_frame, write_frame, write_pcd
from .numerics import DivergenceError
from .pipeline import (BACKBONE, CLASSIFIER, GENERATOR, ConfigError, MissingCheckpointError,
                       RunConfig, _scene_frames, load_backbone, load_classifier, run_eval,
                       run_stage1, run_stage2, run_stage3, write_report, run_all)
from .prototypes import PrototypeError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66

log = logging.getLogger("gzsl_moe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.frames < 0:
        raise UsageError("--frames must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for frame in _scene_frames(cfg, args.split, args.frames):
        if args.format == "pcd":
            path = out / f"{frame.frame_id}.pcd"
            write_pcd(frame, path)
        else:
            path = out / f"{frame.frame_id}.pf"
            write_frame(frame, path)
        print(f"wrote {path} ({len(frame)} points)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "all":
        result = run_all(cfg, out)
        print(result.report.to_text(), end="")
        return EXIT_OK
    runner = {BACKBONE: run_stage1, GENERATOR: run_stage2, CLASSIFIER: run_stage3}[args.stage]
    _, history = runner(cfg, out)
    losses = history.loss if hasattr(history, "loss") else history
    if losses:
        print(f"{args.stage}: final loss {losses[-1]:.6f} after {len(losses)} epochs")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _require_dir(path):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {path}")


def cmd_eval(args) -> int:
    from .data import load_frames

    cfg = _config(args)
    _require_dir(args.ckpt)
    if not Path(args.data).exists():
        raise FileNotFoundError(f"data not found: {args.data}")
    frames = load_frames(args.data)
    report, cm = run_eval(cfg, args.ckpt, frames)
    for p in write_report(report, cm, args.report):
        print(f"wrote {p}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    _require_dir(args.ckpt)
    frame = load_frame(args.input)
    backbone = load_backbone(args.ckpt)
    classifier = load_classifier(args.ckpt)
    pred = infer_frame(backbone, classifier, frame)
    Path(args.out).write_text("".join(f"{int(c)}\n" for c in pred), encoding="utf-8")
    print(f"wrote {len(pred)} labels to {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .verify import suite

    results = suite(args.suite)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"suite {args.suite}: {'all passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gzsl-moe", description="Generalized zero-shot point-cloud segmentation "
                                             "with sparse mixture-of-experts networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write synthetic labeled frames")
    g.add_argument("--config", help="JSON run config (defaults built in)")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train",
                   help="which seed series to draw from (default train)")
    g.add_argument("--format", choices=("pf", "pcd"), default="pf")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--config")
    t.add_argument("--stage", choices=(BACKBONE, GENERATOR, CLASSIFIER, "all"), required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on labeled frames")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="frame file or directory")
    e.add_argument("--report", required=True, help="text report path; CSVs are written beside it")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="label every point of one frame")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("check", help="run a built-in verification suite")
    c.add_argument("--suite", choices=("grad", "moe", "metrics"), required=True)
    c.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stdout, format="%(message)s",
                        level=logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gzsl-moe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, PrototypeError) as exc:
        print(f"gzsl-moe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, MissingCheckpointError) as exc:
        print(f"gzsl-moe: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FileNotFoundError as exc:
        print(f"gzsl-moe: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except FrameFormatError as exc:
        print(f"gzsl-moe: bad input data: {exc}", file=sys.stderr)
        return EXIT_DATAERR
    except ValueError as exc:
        print(f"gzsl-moe: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
