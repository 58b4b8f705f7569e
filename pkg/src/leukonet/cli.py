"""Command-line pipeline: prep -> split -> balance -> train -> eval -> predict.

Exit codes: 0 success, 1 usage error, 2 data/model error.  Every failure
prints a single ``error: ...`` line to stderr.  Images must be binary PPM
(P6, maxval 255); convert JPEG sources beforehand, e.g. with ImageMagick.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, parse_config
from .metrics import evaluate_predictions, write_report
from .models import build_model, calibrate_batchnorm, freeze_backbone, model_spec
from .network import describe
from .optim import AdamState, fit
from .tensor import Rng, ShapeError

log = logging.getLogger("leukonet")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def prepare_model(cfg: TrainConfig, train: dp.Dataset):
    """Build the model for ``cfg`` (calibrated and frozen if requested).

    Returns (model, rng); the same rng then drives shuffling and dropout."""
    if train.images.shape[1:3] != (cfg.input_size, cfg.input_size):
        raise dp.DataError(
            f"training images are {train.images.shape[1]}x{train.images.shape[2]}, config expects {cfg.input_size}"
        )
    rng = Rng(cfg.seed)
    model = build_model(cfg.model, cfg.input_size, len(train.class_names), cfg.width_multiplier,
                        cfg.head_hidden, rng)
    if cfg.freeze_backbone:
        if cfg.model != "mobilenetv2":
            raise ConfigError("freeze_backbone requires model 'mobilenetv2'")
        calibrate_batchnorm(model, dp.normalize(train))
        freeze_backbone(model)
    return model, rng


def run_training(cfg: TrainConfig, model, rng, train: dp.Dataset, val: dp.Dataset | None = None, callback=None):
    adam = AdamState(learning_rate=cfg.learning_rate)
    vx = dp.normalize(val) if val is not None else None
    vy = val.labels if val is not None else None
    return fit(model, dp.normalize(train), train.labels, cfg.epochs, cfg.batch_size, adam, rng, vx, vy, callback)


def train_from_config(cfg: TrainConfig, train: dp.Dataset, val: dp.Dataset | None = None, callback=None):
    """Build, (optionally) freeze and train a model.  Returns (model, log)."""
    model, rng = prepare_model(cfg, train)
    return model, run_training(cfg, model, rng, train, val, callback)


def _atomic_text(path, text: str):
    dp.atomic_write(path, text.encode("utf-8"))


def cmd_prep(args):
    ds = dp.ingest_directory(args.input_dir, args.size)
    dp.save_dataset(ds, args.output)
    print(f"packed {len(ds)} images ({args.size}x{args.size}) counts={ds.class_counts()} -> {args.output}")


def cmd_split(args):
    fr = (args.train, args.val, args.test)
    if abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
        raise UsageError(f"--train/--val/--test must be non-negative and sum to 1 (got {sum(fr):g})")
    ds = dp.load_dataset(args.input)
    parts = dp.stratified_split(ds, fr, Rng(args.seed))
    paths = [f"{args.out_prefix}_{name}.alld" for name in ("train", "val", "test")]
    blobs = [dp.pack_dataset(p) for p in parts]
    for path, blob in zip(paths, blobs):
        dp.atomic_write(path, blob)
    print(" ".join(f"{Path(p).name}={len(d)}" for p, d in zip(paths, parts)))


def cmd_balance(args):
    ds = dp.load_dataset(args.input)
    out = dp.smote_balance(ds, args.k, Rng(args.seed))
    dp.save_dataset(out, args.output)
    print(f"balanced {ds.class_counts()} -> {out.class_counts()} -> {args.output}")


def cmd_train(args):
    cfg = parse_config(args.config)
    train = dp.load_dataset(args.data)
    val = dp.load_dataset(args.val) if args.val else None

    def progress(rec):
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc)

    model, tlog = train_from_config(cfg, train, val, progress)
    ckpt = Path(args.out)
    save_checkpoint(model, cfg, ckpt, train.class_names)
    if args.log:
        _atomic_text(args.log, tlog.to_csv())
    last = tlog.records[-1]
    print(f"trained {cfg.model} for {len(tlog.records)} epochs: train_acc={last.train_acc:.4f} -> {ckpt}")


def cmd_eval(args):
    model, cfg, names = load_checkpoint(args.model)
    ds = dp.load_dataset(args.data)
    if len(ds) == 0:
        raise dp.DataError(f"{args.data}: dataset is empty")
    if tuple(ds.class_names) != tuple(names):
        raise dp.DataError(f"{args.data}: class list {list(ds.class_names)} differs from model {list(names)}")
    probs = model.predict(dp.normalize(ds))
    cm, curves = evaluate_predictions(ds.labels, probs, names)
    write_report(cm, curves, args.report)
    print(f"accuracy={cm.accuracy():.6f} samples={cm.total} report={args.report}")


def cmd_predict(args):
    model, cfg, names = load_checkpoint(args.model)
    img = dp.resize_nearest(dp.read_ppm(args.image), cfg.input_size)
    x = img[None].astype(np.float32) / np.float32(255.0)
    probs = model.forward(x)[0][0]
    label = names[int(np.argmax(probs))]
    print(label + " " + " ".join(f"{p:.6f}" for p in probs))


def cmd_describe(args):
    cfg = parse_config(args.config) if args.config else TrainConfig()
    spec = model_spec(cfg.model, cfg.input_size, args.classes, cfg.width_multiplier, cfg.head_hidden)
    print(describe(spec))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leukonet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("prep", help="pack a directory of class subfolders of PPM images")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--size", type=int, default=224)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("split", help="stratified train/val/test split")
    s.add_argument("--input", required=True)
    s.add_argument("--train", type=float, default=0.8)
    s.add_argument("--val", type=float, default=0.1)
    s.add_argument("--test", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("balance", help="SMOTE-balance a training set")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_balance)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint and write report files")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one PPM image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("model", help="model utilities")
    msub = s.add_subparsers(dest="model_command", parser_class=_Parser)
    d = msub.add_parser("describe", help="print layer shapes and parameter counts")
    d.add_argument("--config")
    d.add_argument("--classes", type=int, default=4)
    d.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_USAGE
    except (dp.DataError, CheckpointError, ShapeError, ValueError, OSError) as e:
        print(f"error: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
