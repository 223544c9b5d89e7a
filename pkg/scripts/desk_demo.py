#!/usr/bin/env python3
"""End-to-end desk demo on synthetic data, laptop-sized.

Generates a small synthetic wound corpus, trains the reduced model on it,
then runs prediction and evaluation (with and without test-time
augmentation) through the same command-line entry points a real run uses.

    python3 scripts/desk_demo.py --out /tmp/desk_demo
"""
import argparse
import sys
import time
from pathlib import Path

from woundseg.cli import main as cli


def run(*argv: str) -> None:
    cmd = " ".join(argv)
    print(f"\n$ woundseg {cmd}")
    code = cli(list(argv))
    if code != 0:
        sys.exit(f"step failed ({code}): woundseg {cmd}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("/tmp/desk_demo"))
    ap.add_argument("--train-images", type=int, default=16)
    ap.add_argument("--val-images", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    root = args.out
    data, run_dir = root / "data", root / "run"
    cfg = Path(__file__).resolve().parent.parent / "configs" / "desk.cfg"

    t0 = time.monotonic()
    run("synth", "--out", str(data), "--train", str(args.train_images),
        "--val", str(args.val_images), "--size", "64", "--seed",
        str(args.seed))
    run("train", "--data", str(data), "--out", str(run_dir),
        "--config", str(cfg), "--epochs", str(args.epochs))
    best = run_dir / "best.rseg"
    run("info", "--checkpoint", str(best), "--size", "64")
    run("predict", "--checkpoint", str(best),
        "--image", str(data / "validation" / "images"),
        "--out", str(root / "pred"), "--patch-size", "32")
    run("evaluate", "--checkpoint", str(best), "--data", str(data),
        "--patch-size", "32", "--out", str(root / "metrics_plain.txt"))
    run("evaluate", "--checkpoint", str(best), "--data", str(data),
        "--patch-size", "32", "--tta", "--out", str(root / "metrics_tta.txt"))
    print(f"\ndone in {time.monotonic() - t0:.1f}s — artifacts under {root}")


if __name__ == "__main__":
    main()
