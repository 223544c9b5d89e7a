#!/usr/bin/env python3
"""Parameter and FLOPS accounting for the bundled model presets.

Prints per-layer tables (via the `info` machinery) or a compact summary
comparing all presets at a chosen input size.

    python3 scripts/accounting.py                    # summary, 224x224
    python3 scripts/accounting.py --preset default   # full per-layer table
"""
import argparse

from woundseg import default_config, param_count, reduced_config, \
    vanilla_unet_config
from woundseg.cli import main as cli
from woundseg.model import flops_count

PRESETS = {
    "default": default_config,
    "vanilla": vanilla_unet_config,
    "reduced": reduced_config,
}


def summary(size: int) -> None:
    hw = (size, size)
    vanilla = param_count(vanilla_unet_config())
    print(f"{'preset':<10} {'params':>12} {'GFLOPS@' + str(size):>12} "
          f"{'params/vanilla':>15}")
    for name, build in PRESETS.items():
        cfg = build()
        p = param_count(cfg)
        g = flops_count(cfg, hw) / 1e9
        print(f"{name:<10} {p:>12,} {g:>12.3f} {p / vanilla:>15.3f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS),
                    help="print the full per-layer table for one preset")
    ap.add_argument("--size", type=int, default=224)
    args = ap.parse_args()
    if args.preset:
        raise SystemExit(cli(["info", "--preset", args.preset,
                              "--size", str(args.size)]))
    summary(args.size)


if __name__ == "__main__":
    main()
