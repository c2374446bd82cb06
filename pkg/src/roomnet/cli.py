"""``roomnet`` command line: train, eval, infer, gradcheck, gen-data.

The thread count for numpy's BLAS backend comes from ``ROOMNET_THREADS``
(default 1, which also makes training bitwise reproducible).
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from roomnet.errors import RoomNetError

THREADS_ENV = "ROOMNET_THREADS"
log = logging.getLogger("roomnet")


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise RoomNetError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _int_pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(",")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b' or 'a', got {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from roomnet.data import generate_dataset, write_dataset

    types = None if args.types is None else [int(t) for t in args.types.split(",")]
    samples = generate_dataset(args.n, args.size, args.size, args.seed, args.occluders, types)
    manifest = write_dataset(samples, args.out, ext=args.ext)
    print(f"wrote {len(manifest)} samples to {manifest.root}")
    return 0


def _load_split(path, size, dtype, require_native=False):
    from roomnet.data import load_dataset, load_samples
    from roomnet.train import prepare_split

    return prepare_split(load_samples(load_dataset(path)), size, dtype, require_native)


def cmd_train(args) -> int:
    from roomnet.checkpoint import load_checkpoint
    from roomnet.config import format_config, load_config, parse_config
    from roomnet.train import Trainer

    cfg = load_config(args.config, args.set) if args.config else parse_config("", overrides=args.set)
    if not cfg.train_data:
        raise RoomNetError("train_data is not set")
    dtype = cfg.model.np_dtype
    train = _load_split(cfg.train_data, cfg.model.input_size, dtype)
    val = _load_split(cfg.val_data, cfg.model.input_size, dtype) if cfg.val_data else None
    out = Path(cfg.checkpoint_dir or "runs")
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), cfg, train, val, out)
    else:
        trainer = Trainer(cfg, train, val, out)
    (out / "config.txt").write_text(format_config(cfg))
    history = trainer.run(metrics_path=out / "metrics.csv")
    last = history[-1] if history else {}
    print(f"trained {trainer.epoch} epochs; final training loss {last.get('train_loss', float('nan')):.5f}")
    best = trainer.best_epoch()
    if best:
        print(f"best validation keypoint error {best['keypoint_error']:.3f}% at epoch {best['epoch']}")
    print(f"checkpoints and metrics in {out}")
    return 0


def cmd_eval(args) -> int:
    from roomnet.train import evaluate, load_model

    model = load_model(args.checkpoint)
    split = _load_split(args.data, model.config.input_size, model.config.np_dtype, not args.resize)
    report = evaluate(model, split, args.flip_average)
    print(report.format_text())
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_infer(args) -> int:
    from roomnet.data import preprocess
    from roomnet.geometry import Layout, write_layout
    from roomnet.imageio import read_image, write_image, write_pnm
    from roomnet.train import PreparedSplit, composite_heatmaps, draw_segments, load_model, predict

    model = load_model(args.checkpoint)
    image = read_image(args.image)
    h, w = image.shape[:2]
    size = model.config.input_size
    x = preprocess(image, size)[None].astype(model.config.np_dtype)
    # the placeholder ground truth only carries the source size
    dummy = Layout(8, np.zeros((2, 2)), w, h)
    pred = predict(model, PreparedSplit(x, [dummy], [dummy]), args.flip_average)[0]
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_layout(pred.layout, stem.with_suffix(".txt"))
    write_image(stem.with_name(stem.name + "_overlay" + args.ext), draw_segments(image, pred.layout))
    if args.heatmaps:
        pages = np.round(255 * np.clip(pred.heatmaps, 0, 1)).astype(np.uint8)
        with open(stem.with_name(stem.name + "_heatmaps.pgm"), "wb") as fh:
            for page in pages:
                fh.write(f"P5\n{page.shape[1]} {page.shape[0]}\n255\n".encode() + page.tobytes())
        write_pnm(stem.with_name(stem.name + "_composite.ppm"),
                  composite_heatmaps(pred.heatmaps, pred.layout.room_type, size))
    print(f"room type {pred.layout.room_type}; layout written to {stem.with_suffix('.txt')}")
    return 0


def cmd_gradcheck(args) -> int:
    from roomnet.engine import gradcheck

    results = gradcheck.run_suite(args.size, include_model=not args.ops_only)
    print(gradcheck.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomnet", description="Room layout estimation: data generation, training, evaluation, inference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--size", type=int, default=80)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--occluders", type=_int_pair, default=(0, 2), help="min,max occluders per image")
    g.add_argument("--types", help="comma-separated room types to cycle through")
    g.add_argument("--ext", default=".ppm", choices=(".ppm", ".png"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", help="write per-sample rows here")
    e.add_argument("--flip-average", action="store_true")
    e.add_argument("--resize", action="store_true", help="rescale images that differ from the model input size")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict the layout of one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output path stem")
    i.add_argument("--flip-average", action="store_true")
    i.add_argument("--heatmaps", action="store_true", help="also dump heatmap pages and a color composite")
    i.add_argument("--ext", default=".ppm", choices=(".ppm", ".png"), help="overlay image format")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--size", default="tiny", choices=("tiny", "small"))
    c.add_argument("--ops-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
        with limiter if limiter is not None else contextlib.nullcontext():
            return args.func(args)
    except (RoomNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
