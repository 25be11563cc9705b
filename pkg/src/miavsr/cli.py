"""Command line entry point: ``miavsr {gen,infer,train,flops,check-grad}``.

Exit status 0 on success, 1 on a runtime failure, 2 on a malformed config or
arguments.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, harness
from .flops import report_csv
from .formats import FormatError, read_frame_dir
from .model import MODES, ConfigError
from .synthetic import PATTERNS, SyntheticSpec


def _velocity(s: str) -> tuple[int, int]:
    try:
        dy, dx = (int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("velocity must look like DY,DX") from None
    return dy, dx


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="miavsr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic sequence as MIAT frames")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--pattern", choices=PATTERNS, default="mixed")
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--height", type=int, default=64, help="HR height")
    g.add_argument("--width", type=int, default=64, help="HR width")
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--velocity", type=_velocity, default=(1, 0))
    g.add_argument("--fraction", type=float, default=0.25)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)

    def common(p, frames=True):
        p.add_argument("--config", type=Path, help="run config JSON (defaults: desk scale)")
        p.add_argument("--checkpoint", type=Path, help="checkpoint directory to load")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if frames:
            p.add_argument("--input", required=True, type=Path, help="directory of LR frames")
            p.add_argument("--target", type=Path, help="directory of HR frames")

    i = sub.add_parser("infer", help="super-resolve a sequence and write metrics")
    common(i)
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--mode", choices=MODES, help="overrides the config mode")
    i.add_argument("--threshold", type=float, help="handcrafted-mask threshold")
    i.add_argument("--saturate-masks", action="store_true",
                   help="force every learned mask to 1")
    i.add_argument("--dump-masks", action="store_true", help="write PGM masks")
    i.add_argument("--dump-frames", action="store_true", help="write HR frames as MIAT")

    t = sub.add_parser("train", help="train on one sequence")
    common(t)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--mode", choices=("unmasked", "masked"))

    f = sub.add_parser("flops", help="per-block analytic vs instrumented cost CSV")
    common(f, frames=False)
    f.add_argument("--height", type=int, default=16, help="LR height")
    f.add_argument("--width", type=int, default=16, help="LR width")
    f.add_argument("--frames", type=int, default=3)
    f.add_argument("--alpha", type=float, help="force masks of this density")
    f.add_argument("--out", type=Path, help="write CSV here instead of stdout")

    c = sub.add_parser("check-grad", help="finite-difference gradient report")
    c.add_argument("--ops", nargs="*", choices=sorted(gradcheck.CHECKS))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path)
    return ap


def _run_config(args) -> harness.RunConfig:
    run = harness.load_run_config(args.config)
    if args.seed is not None:
        run = harness.RunConfig(run.model.replace(seed=args.seed), run.mode)
    mode = getattr(args, "mode", None)
    if mode is not None:
        run = harness.RunConfig(run.model, mode)
    return run


def _emit(text: bytes, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text.decode())
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(text)


def _dispatch(args) -> int:
    if args.command == "gen":
        spec = SyntheticSpec(T=args.frames, H=args.height, W=args.width, pattern=args.pattern,
                             velocity=args.velocity, fraction=args.fraction, noise=args.noise,
                             seed=args.seed, scale=args.scale)
        harness.run_gen(spec, args.out)
        return 0
    if args.command == "check-grad":
        results = gradcheck.run_checks(args.ops, seed=args.seed)
        _emit(gradcheck.results_csv(results).encode(), args.out)
        return 0 if all(r.ok for r in results) else 1

    run = _run_config(args)
    cfg = run.model
    params = harness.load_params(cfg, args.checkpoint)
    if args.command == "flops":
        rows, _ = harness.flops_report(cfg, params, args.height, args.width, args.frames,
                                       args.alpha, seed=cfg.seed)
        _emit(report_csv(rows).encode(), args.out)
        return 0

    lr = read_frame_dir(args.input)
    hr = read_frame_dir(args.target) if args.target else None
    if args.command == "infer":
        out = harness.run_infer(cfg, params, lr, hr, run.mode, args.threshold,
                                args.saturate_masks, args.dump_masks, args.dump_frames)
        out.write(args.out)
        return 0
    if hr is None:
        raise ConfigError("train needs --target")
    harness.run_train(run, params, lr, hr, args.steps, args.lr, args.out, seed=cfg.seed)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"miavsr: config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ValueError, OSError, FloatingPointError) as e:
        print(f"miavsr: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
