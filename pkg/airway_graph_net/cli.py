# cli.py
"""
Command-line entry point (``agn``).

    agn gen-data    --slices N --size H W --seed S --difficulty D --out FILE
    agn train-cnn   --data FILE --config FILE --out CKPT --metrics CSV
    agn train-joint --data FILE --cnn-ckpt CKPT --config FILE --out CKPT --metrics CSV
    agn predict     --data FILE --ckpt CKPT --out DIR [--compare-cnn CKPT]
    agn eval        --data FILE --ckpt CKPT --metrics CSV
"""
import argparse
import os
import sys
from typing import List, Optional

import numpy as np
from PIL import Image

from . import diagnostics
from .checkpoint import load_checkpoint
from .config import load_config
from .errors import AgnError
from .graph_builder import write_graph_dump
from .metrics import MetricRecord, binarize, write_metrics_csv
from .model import AgnModel
from .phantom_data import (
    DIFFICULTIES,
    PhantomVolume,
    filter_empty_slices,
    generate_phantom,
    load_volume,
    save_volume,
    split_volume,
    window_hu,
)
from .training import evaluate, prepare_samples, train_cnn, train_joint

# =========================
# IMAGES
# =========================


def to_gray(image01: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 gray levels, rounding half up."""
    levels = np.floor(np.clip(np.asarray(image01, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return levels.astype(np.uint8)


def write_pgm(path: str, image01: np.ndarray):
    """Binary graymap (P5, maxval 255)."""
    try:
        Image.fromarray(to_gray(image01)).save(path, format="PPM")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


# =========================
# COMMANDS
# =========================


def _training_splits(vol: PhantomVolume, train_fraction: float):
    return split_volume(filter_empty_slices(vol), train_fraction)


def cmd_gen_data(args) -> int:
    settings = load_config(args.config)
    vol = generate_phantom(args.slices, args.size[0], args.size[1], args.seed, args.difficulty,
                           palette=settings.train.palette(), empty_slices=args.empty_slices)
    save_volume(vol, args.out)
    diagnostics.report(f"gen-data: wrote {vol.n_slices} slices of {args.size[0]}x{args.size[1]} to {args.out}")
    return 0


def cmd_train_cnn(args) -> int:
    vol = load_volume(args.data)
    settings = load_config(args.config, vol.hu.shape[1:])
    train_vol, test_vol = _training_splits(vol, settings.train.train_fraction)
    result = train_cnn(train_vol, test_vol, settings)
    result.model.save(args.out)
    write_metrics_csv(result.records, args.metrics)
    diagnostics.report(f"train-cnn: checkpoint {args.out}, {len(result.records)} metric rows in {args.metrics}")
    return 0


def cmd_train_joint(args) -> int:
    vol = load_volume(args.data)
    settings = load_config(args.config, vol.hu.shape[1:])
    train_vol, test_vol = _training_splits(vol, settings.train.train_fraction)
    result = train_joint(train_vol, test_vol, settings, cnn_entries=load_checkpoint(args.cnn_ckpt))
    result.model.save(args.out)
    write_metrics_csv(result.records, args.metrics)
    diagnostics.report(
        f"train-joint: checkpoint {args.out}, {result.graph_builds} graph builds, "
        f"{len(result.records)} metric rows in {args.metrics}"
    )
    return 0


def _select(vol: PhantomVolume, limit: Optional[int]) -> PhantomVolume:
    if limit is None:
        return vol
    return PhantomVolume(hu=vol.hu[:limit], mask=vol.mask[:limit], seed=vol.seed)


def cmd_predict(args) -> int:
    model = AgnModel.from_checkpoint(args.ckpt)
    compare = AgnModel.from_checkpoint(args.compare_cnn) if args.compare_cnn else None
    vol = _select(load_volume(args.data), args.limit)
    os.makedirs(args.out, exist_ok=True)
    threshold = model.settings.train.threshold

    samples = prepare_samples(vol, model.settings.preprocess, model.store.dtype)
    for z, (x, y) in enumerate(samples):
        stem = os.path.join(args.out, f"slice_{z:04d}")
        write_pgm(f"{stem}_input.pgm", window_hu(vol.hu[z], model.settings.preprocess))
        write_pgm(f"{stem}_truth.pgm", y)
        if model.kind == "joint":
            out = model.forward_joint(x, training=False)
            prob = out.prob
            if args.graph_dump:
                write_graph_dump(out.graph, f"{stem}_graph.txt")
        else:
            prob = model.predict(x)
        write_pgm(f"{stem}_prob.pgm", prob)
        write_pgm(f"{stem}_mask.pgm", binarize(prob, threshold))
        if compare is not None:
            cnn_prob = compare.cnn.forward(x, training=False).prob
            write_pgm(f"{stem}_cnn_prob.pgm", cnn_prob)
            write_pgm(f"{stem}_cnn_mask.pgm", binarize(cnn_prob, threshold))
    diagnostics.report(f"predict: {len(samples)} slice(s) written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = AgnModel.from_checkpoint(args.ckpt)
    if args.split == "test":
        _, vol = _training_splits(load_volume(args.data), model.settings.train.train_fraction)
    else:
        vol = load_volume(args.data)
    result = evaluate(model, prepare_samples(vol, model.settings.preprocess, model.store.dtype))
    records = [
        MetricRecord(z, "test", loss, dice)
        for z, (loss, dice) in enumerate(zip(result.losses, result.dice))
    ]
    write_metrics_csv(records, args.metrics)
    diagnostics.report(
        f"eval: {len(records)} slice(s), mean loss {result.mean_loss:.6f}, mean dice {result.mean_dice:.4f}"
    )
    return 0


# =========================
# ARGUMENTS
# =========================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agn", description="Airway graph network on synthetic CT phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom volume")
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--difficulty", choices=DIFFICULTIES, default="tube_only")
    p.add_argument("--empty-slices", type=int, default=0, help="leading slices without airway")
    p.add_argument("--config", help="config file (HU palette keys)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cnn", help="pretrain the CNN stream")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("train-joint", help="train CNN, graph attention and fusion streams together")
    p.add_argument("--data", required=True)
    p.add_argument("--cnn-ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("predict", help="write probability and mask images")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compare-cnn", metavar="CKPT")
    p.add_argument("--limit", type=int, help="only the first N slices")
    p.add_argument("--graph-dump", action="store_true", help="also write each slice's graph (joint models)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-slice loss and dice")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AgnError as e:
        diagnostics.report(f"{args.command} FAILED: {type(e).__name__}: {e}")
        return 2
    except OSError as e:
        diagnostics.report(f"{args.command} FAILED: I/O error: {e}")
        return 1
    finally:
        diagnostics.flush_log()


if __name__ == "__main__":
    sys.exit(main())
