"""Command-line interface.

Subcommands:
    train      fit a model on a train/validation directory tree
    predict    write binary masks for images using a checkpoint
    evaluate   report segmentation metrics on a labeled split
    info       per-layer parameter and FLOP accounting for a model
    synth      generate a synthetic labeled corpus

Failures print a single machine-parseable line to stderr:
    error: category=<config|data|checkpoint|shape|numeric|usage> <message>
and exit with status 1.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_model, save_model
from .config import (RunConfig, load_run_config, override_run_config,
                     run_config_from_kv, save_run_config)
from .data import (DIHEDRAL_TRANSFORMS, DataError, load_sample, pair_files,
                   predict_probabilities, save_mask_png, tta_predict)
from .losses import binarize_array
from .metrics import ConfusionCounts, count_confusion, metrics_from_counts
from .model import (ConfigError, Model, default_config, reduced_config,
                    vanilla_unet_config)
from .synth import generate_dataset
from .tensor import NumericError, ShapeError, TapeError, Tensor
from .train import train as run_train

_PRESETS = {
    "default": default_config,
    "vanilla": vanilla_unet_config,
    "reduced": reduced_config,
}


# --------------------------------------------------------------------------
# Helpers

def _parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            side = int(parts[0])
            return side, side
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise ConfigError(f"size must look like '224' or '224x320', got {text!r}")


def _load_split(root: Path, split: str) -> list:
    pairs = pair_files(root / split / "images", root / split / "labels")
    return [load_sample(img, lab) for img, lab in pairs]


def _resolve_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("lr", "batch_size", "epochs", "patch_size", "seed", "threshold"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    return override_run_config(cfg, **overrides)


def _gather_images(image_args: list[str]) -> list[Path]:
    paths: list[Path] = []
    for raw in image_args:
        p = Path(raw)
        if p.is_dir():
            found = sorted(p.glob("*.png"))
            if not found:
                raise DataError(f"no PNG images in directory {p}")
            paths.extend(found)
        else:
            paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    cfg = _resolve_run_config(args)
    root = Path(args.data)
    train_samples = _load_split(root, "train")
    val_dir = root / "validation"
    val_samples = _load_split(root, "validation") if val_dir.is_dir() else []
    print(f"training on {len(train_samples)} images "
          f"({len(val_samples)} validation), patch {cfg.patch_size}, "
          f"batch {cfg.batch_size}, {cfg.epochs} epochs")
    result = run_train(cfg, train_samples, val_samples, args.out, log=print)
    if result.best_path is not None:
        print(f"best checkpoint: {result.best_path} "
              f"(epoch {result.best_epoch}, dsc={result.best_dsc:.6f})")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint)
    if args.patch_size % model.cfg.pool_factor:
        raise ConfigError(
            f"patch size {args.patch_size} is not divisible by the model's "
            f"pooling factor {model.cfg.pool_factor}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    transforms = DIHEDRAL_TRANSFORMS if args.tta else DIHEDRAL_TRANSFORMS[:1]
    for path in _gather_images(args.image):
        sample = load_sample(path)
        image = Tensor(sample.image[None])
        mask = tta_predict(model, image, transforms, args.patch_size,
                           args.threshold, args.batch_size)
        out_path = out_dir / f"{path.stem}_mask.png"
        save_mask_png(out_path, mask.data[0])
        print(f"{path.name} -> {out_path}")
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_model(args.checkpoint)
    root = Path(args.data)
    samples = _load_split(root, args.split)
    transforms = DIHEDRAL_TRANSFORMS if args.tta else DIHEDRAL_TRANSFORMS[:1]
    total = ConfusionCounts(0, 0, 0, 0)
    per_image = []
    for s in samples:
        image = Tensor(s.image[None])
        if args.tta:
            pred = tta_predict(model, image, transforms, args.patch_size,
                               args.threshold, args.batch_size).data
        else:
            prob = predict_probabilities(model, image, args.patch_size,
                                         args.batch_size)
            pred = binarize_array(prob.data, args.threshold)
        counts = count_confusion(pred, s.mask[None])
        total = total + counts
        per_image.append((s.name, metrics_from_counts(counts)))

    lines = [f"images={len(samples)}", f"tta={'on' if args.tta else 'off'}"]
    if args.per_image:
        for name, rep in per_image:
            lines.append(
                f"image={name} dsc={rep.dsc:.6f} jsi={rep.jsi:.6f} "
                f"sensitivity={rep.sensitivity:.6f} "
                f"specificity={rep.specificity:.6f} precision={rep.precision:.6f}")
    micro = metrics_from_counts(total)
    lines += [f"micro_{line}" for line in micro.to_text().splitlines()]
    for key in ("dsc", "jsi", "sensitivity", "specificity", "precision"):
        mean = float(np.mean([getattr(rep, key) for _, rep in per_image]))
        lines.append(f"macro_{key}={mean:.6f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_info(args) -> int:
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
    elif args.config:
        model = Model(load_run_config(args.config).model)
    else:
        model = Model(_PRESETS[args.preset]())
    hw = _parse_hw(args.size)
    if hw[0] % model.cfg.pool_factor or hw[1] % model.cfg.pool_factor:
        raise ConfigError(
            f"input size {hw} is not divisible by the model's pooling "
            f"factor {model.cfg.pool_factor}")
    rows = model.accounting(hw)
    name_w = max(len(r[0]) for r in rows)
    det_w = max(len(r[1]) for r in rows)
    print(f"{'layer':<{name_w}}  {'shape':<{det_w}}  {'params':>12}  {'flops':>16}")
    for name, detail, params, flops in rows:
        print(f"{name:<{name_w}}  {detail:<{det_w}}  {params:>12,}  {flops:>16,}")
    total_p = model.param_count()
    total_f = model.flops_count(hw)
    print(f"{'total':<{name_w}}  {'':<{det_w}}  {total_p:>12,}  {total_f:>16,}")
    print(f"input={hw[0]}x{hw[1]} params={total_p} "
          f"flops={total_f} gflops={total_f / 1e9:.3f}")
    return 0


def cmd_synth(args) -> int:
    hw = _parse_hw(args.size)
    counts = generate_dataset(args.out, args.train, args.val, hw, args.seed)
    print(f"wrote {counts['train']} train and {counts['validation']} "
          f"validation images ({hw[0]}x{hw[1]}) under {args.out}")
    return 0


def cmd_init_config(args) -> int:
    save_run_config(args.out, RunConfig())
    print(f"wrote default config to {args.out}")
    return 0


# --------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="woundseg",
        description="Patch-based binary wound segmentation: train, predict, "
                    "evaluate, and inspect residual-attention encoder-decoder "
                    "models.")
    p.add_argument("--version", action="version", version=f"woundseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a dataset tree")
    t.add_argument("--data", required=True,
                   help="dataset root containing train/ (and validation/) "
                        "with images/ and labels/ subdirectories")
    t.add_argument("--out", required=True, help="output directory for run artifacts")
    t.add_argument("--config", help="key=value run config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    pp = sub.add_parser("predict", help="write predicted masks for images")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--image", required=True, nargs="+",
                    help="PNG files and/or directories of PNGs")
    pp.add_argument("--out", required=True, help="directory for *_mask.png outputs")
    pp.add_argument("--tta", action="store_true",
                    help="majority vote over all 8 dihedral transforms")
    pp.add_argument("--threshold", type=float, default=0.5)
    pp.add_argument("--patch-size", dest="patch_size", type=int, default=224)
    pp.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    pp.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics on a labeled split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", default="validation")
    e.add_argument("--tta", action="store_true")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--patch-size", dest="patch_size", type=int, default=224)
    e.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    e.add_argument("--per-image", dest="per_image", action="store_true")
    e.add_argument("--out", help="also write the report to this file")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("info", help="parameter and FLOP accounting")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(_PRESETS), default="default")
    i.add_argument("--size", default="224", help="input size, e.g. 224 or 224x320")
    i.set_defaults(func=cmd_info)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=16)
    s.add_argument("--val", type=int, default=4)
    s.add_argument("--size", default="224")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("init-config", help="write the default run config")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_init_config)

    return p


_CATEGORIES: tuple[tuple[type, str], ...] = (
    (ConfigError, "config"),
    (CheckpointError, "checkpoint"),
    (DataError, "data"),
    (ShapeError, "shape"),
    (NumericError, "numeric"),
    (TapeError, "numeric"),
    (FileNotFoundError, "data"),
    (ValueError, "usage"),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(exc for exc, _ in _CATEGORIES) as e:
        category = next(cat for exc, cat in _CATEGORIES if isinstance(e, exc))
        print(f"error: category={category} {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
