"""Synthetic wound-segmentation corpus.

Each sample is a skin-toned textured background with 1-3 dark reddish
elliptical lesions. The mask is the exact analytic union of the ellipse
interiors, so ground truth carries no rasterization ambiguity. Generation
is fully deterministic for a given seed and size.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Sample, _resize_chw, save_image_png, save_mask_png


def _ellipse_mask(hw: tuple[int, int], cy: float, cx: float, a: float,
                  b: float, theta: float) -> np.ndarray:
    """Boolean interior of a rotated ellipse evaluated at pixel centers."""
    h, w = hw
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy = ys - cy
    dx = xs - cx
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _background(rng: np.random.Generator, hw: tuple[int, int]) -> np.ndarray:
    """Skin-like base color with low-frequency texture and fine grain."""
    h, w = hw
    base = np.array([rng.uniform(0.70, 0.85),
                     rng.uniform(0.55, 0.68),
                     rng.uniform(0.45, 0.60)], dtype=np.float64)
    coarse = rng.uniform(-1.0, 1.0, size=(3, 6, 8))
    texture = _resize_chw(coarse, (h, w), order=1) * 0.05
    grain = rng.normal(0.0, 0.015, size=(3, h, w))
    return base[:, None, None] + texture + grain


def make_sample(rng: np.random.Generator, hw: tuple[int, int] = (224, 224),
                name: str = "") -> Sample:
    """One synthetic sample with its exact foreground mask."""
    h, w = hw
    if min(h, w) < 24:
        raise ValueError(f"synthetic images must be at least 24 px per side, got {hw}")
    image = _background(rng, hw)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        scale = min(h, w)
        a = rng.uniform(0.10, 0.22) * scale
        b = rng.uniform(0.10, 0.22) * scale
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        theta = rng.uniform(0.0, math.pi)
        mask |= _ellipse_mask(hw, cy, cx, a, b, theta)

    # Wound coloring: pink at the rim shading into dark red toward the
    # interior, driven by the distance-to-boundary transform. All shading
    # stays strictly inside the analytic mask.
    edge = np.array([rng.uniform(0.55, 0.70),
                     rng.uniform(0.22, 0.32),
                     rng.uniform(0.22, 0.32)], dtype=np.float64)
    core = np.array([rng.uniform(0.30, 0.45),
                     rng.uniform(0.05, 0.15),
                     rng.uniform(0.05, 0.12)], dtype=np.float64)
    depth = ndimage.distance_transform_edt(mask)
    shade = np.clip(depth / 6.0, 0.0, 1.0)
    wound = edge[:, None, None] + (core - edge)[:, None, None] * shade
    wound = wound + rng.normal(0.0, 0.02, size=wound.shape)
    image = np.where(mask[None, :, :], wound, image)

    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32),
                  mask[None, :, :].astype(np.float32), name)


def make_corpus(n: int, rng: np.random.Generator,
                hw: tuple[int, int] = (224, 224),
                prefix: str = "synth") -> list[Sample]:
    return [make_sample(rng, hw, name=f"{prefix}_{i:04d}") for i in range(n)]


def generate_dataset(out_dir: str | Path, n_train: int, n_val: int,
                     hw: tuple[int, int] = (224, 224), seed: int = 0) -> dict[str, int]:
    """Write a train/validation corpus in the standard dataset layout:

        out_dir/train/images/*.png       out_dir/train/labels/*.png
        out_dir/validation/images/*.png  out_dir/validation/labels/*.png

    Returns the number of images written per split.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = {}
    for split, n in (("train", n_train), ("validation", n_val)):
        img_dir = out_dir / split / "images"
        lab_dir = out_dir / split / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        lab_dir.mkdir(parents=True, exist_ok=True)
        for s in make_corpus(n, rng, hw, prefix=split):
            save_image_png(img_dir / f"{s.name}.png", s.image)
            save_mask_png(lab_dir / f"{s.name}.png", s.mask)
        counts[split] = n
    return counts
