"""Data pipeline: PNG sample loading, patch tiling with exact stitching,
the dihedral-8 transform group, training augmentation, and test-time
augmentation with majority voting.

Images travel as (3, H, W) float32 arrays in [0, 1]; masks as (1, H, W)
float32 arrays with values in {0, 1}. Geometric transforms use nearest
neighbor on masks so binarity is never diluted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .losses import binarize_array
from .tensor import ShapeError, Tensor


class DataError(ValueError):
    """Raised for malformed datasets, masks, or image files."""


# --------------------------------------------------------------------------
# Samples and PNG I/O

@dataclass
class Sample:
    image: np.ndarray                 # (3, H, W) float32 in [0, 1]
    mask: Optional[np.ndarray]        # (1, H, W) float32 in {0, 1}
    name: str = ""

    def copy(self) -> "Sample":
        return Sample(self.image.copy(),
                      None if self.mask is None else self.mask.copy(),
                      self.name)


def load_image_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise DataError(f"only PNG images are supported, got {path.name!r}")
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def load_mask_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise DataError(f"only PNG masks are supported, got {path.name!r}")
    if not path.is_file():
        raise DataError(f"mask file not found: {path}")
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    bad = np.setdiff1d(np.unique(raw), (0, 255))
    if bad.size:
        raise DataError(f"mask {path.name!r} must contain only 0 and 255, "
                        f"found value {int(bad[0])}")
    return (raw == 255).astype(np.float32)[None, :, :]


def load_sample(image_path: str | Path, mask_path: Optional[str | Path] = None) -> Sample:
    image = load_image_png(image_path)
    mask = None
    if mask_path is not None:
        mask = load_mask_png(mask_path)
        if mask.shape[1:] != image.shape[1:]:
            raise DataError(
                f"image {Path(image_path).name!r} is {image.shape[1:]} but its mask "
                f"is {mask.shape[1:]}")
    return Sample(image, mask, name=Path(image_path).stem)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Write a (1, H, W) or (H, W) binary mask as an 8-bit {0, 255} PNG."""
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray((arr > 0.5).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as an RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def pair_files(images_dir: str | Path, labels_dir: str | Path) -> list[tuple[Path, Path]]:
    """Match PNGs by filename across the two directories; any file without a
    partner is an error, with the offenders listed."""
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    for d in (images_dir, labels_dir):
        if not d.is_dir():
            raise DataError(f"dataset directory missing: {d}")
    imgs = {p.name: p for p in sorted(images_dir.glob("*.png"))}
    labs = {p.name: p for p in sorted(labels_dir.glob("*.png"))}
    if not imgs:
        raise DataError(f"no PNG images in {images_dir}")
    unmatched = sorted(set(imgs) ^ set(labs))
    if unmatched:
        raise DataError(f"unmatched image/label files: {unmatched}")
    return [(imgs[n], labs[n]) for n in sorted(imgs)]


# --------------------------------------------------------------------------
# Patch tiling

@dataclass(frozen=True)
class PatchGrid:
    """Tiling record: where each patch sits in the zero-padded canvas."""

    original_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    size: int
    origins: tuple[tuple[int, int], ...]

    @property
    def count(self) -> int:
        return len(self.origins)


def extract_patches(t: Tensor, size: int = 224) -> tuple[list[Tensor], PatchGrid]:
    """Tile a (1, C, H, W) tensor into non-overlapping size x size patches,
    zero-padding the bottom/right edges up to the next multiple of size.
    Patches are ordered row-major by origin."""
    if size < 1:
        raise ShapeError(f"patch size must be >= 1, got {size}")
    n, c, h, w = t.shape
    if n != 1:
        raise ShapeError(f"extract_patches expects batch 1, got {n}")
    ph = math.ceil(h / size) * size
    pw = math.ceil(w / size) * size
    canvas = np.zeros((1, c, ph, pw), dtype=t.dtype)
    canvas[:, :, :h, :w] = t.data
    origins = []
    patches = []
    for i in range(0, ph, size):
        for j in range(0, pw, size):
            origins.append((i, j))
            patches.append(Tensor(np.ascontiguousarray(
                canvas[:, :, i:i + size, j:j + size])))
    grid = PatchGrid((h, w), (ph, pw), size, tuple(origins))
    return patches, grid


def stitch_patches(patches: Sequence[Tensor], grid: PatchGrid) -> Tensor:
    """Exact inverse of extract_patches, cropped back to the original size."""
    if len(patches) != grid.count:
        raise ShapeError(f"got {len(patches)} patches for a {grid.count}-cell grid")
    c = patches[0].shape[1]
    ph, pw = grid.padded_hw
    canvas = np.zeros((1, c, ph, pw), dtype=patches[0].dtype)
    for patch, (i, j) in zip(patches, grid.origins):
        if patch.shape != (1, c, grid.size, grid.size):
            raise ShapeError(f"patch shape {patch.shape} does not match grid "
                             f"size {grid.size}")
        canvas[:, :, i:i + grid.size, j:j + grid.size] = patch.data
    h, w = grid.original_hw
    return Tensor(np.ascontiguousarray(canvas[:, :, :h, :w]))


# --------------------------------------------------------------------------
# Dihedral-8 transform group

class DihedralTransform:
    """One of the 8 symmetries of the square, acting on the last two axes.

    Indices 0-3 are counterclockwise rotations by 90*k degrees; 4-7 are the
    same rotations composed with a horizontal flip (width reversal) applied
    first. Rotations invert to rotations; reflections are self-inverse.
    """

    def __init__(self, index: int):
        if not 0 <= index < 8:
            raise ValueError(f"dihedral index must be in [0, 8), got {index}")
        self.index = index

    def apply(self, arr: np.ndarray) -> np.ndarray:
        k, flip = self.index % 4, self.index >= 4
        out = arr[..., ::-1] if flip else arr
        return np.ascontiguousarray(np.rot90(out, k, axes=(-2, -1)))

    @property
    def inverse(self) -> "DihedralTransform":
        if self.index < 4:
            return DihedralTransform((4 - self.index) % 4)
        return DihedralTransform(self.index)

    def __repr__(self) -> str:
        names = ("id", "rot90", "rot180", "rot270",
                 "flip", "flip+rot90", "flip+rot180", "flip+rot270")
        return f"DihedralTransform({names[self.index]})"


DIHEDRAL_TRANSFORMS: tuple[DihedralTransform, ...] = tuple(
    DihedralTransform(i) for i in range(8))


# --------------------------------------------------------------------------
# Interpolation helpers

def _resize_chw(arr: np.ndarray, out_hw: tuple[int, int], order: int) -> np.ndarray:
    """Resize (C, H, W) with the half-pixel-center coordinate convention;
    order 1 is bilinear, order 0 nearest neighbor."""
    c, h, w = arr.shape
    oh, ow = out_hw
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((c, oh, ow), dtype=arr.dtype)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(arr[ch], [grid_y, grid_x],
                                          order=order, mode="nearest")
    return out


def _affine_chw(arr: np.ndarray, deg: float, tx: float, ty: float,
                order: int) -> np.ndarray:
    """Rotate about the image center and translate, sampling with zero fill
    outside the original support."""
    c, h, w = arr.shape
    theta = math.radians(deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    yr = ys - cy - ty
    xr = xs - cx - tx
    src_y = cos_t * yr + sin_t * xr + cy
    src_x = -sin_t * yr + cos_t * xr + cx
    out = np.empty_like(arr)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(arr[ch], [src_y, src_x], order=order,
                                          mode="grid-constant", cval=0.0)
    return out


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0,1] -> HSV, matching the colorsys conventions."""
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc,
                 np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v]).astype(rgb.dtype)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(hsv.dtype)


# --------------------------------------------------------------------------
# Training augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Gates and ranges for the training augmentation pipeline. Geometric
    transforms (dihedral, crop, affine) hit image and mask alike; the
    photometric set (HSV jitter, blur, noise) is image-only."""

    dihedral_p: float = 1.0
    rrc_p: float = 1.0
    rrc_scale_min: float = 0.5
    rrc_scale_max: float = 1.0
    affine_p: float = 0.3
    affine_max_deg: float = 10.0
    affine_max_translate: float = 0.05
    hsv_p: float = 0.3
    hsv_max_h: float = 0.03
    hsv_max_s: float = 0.10
    hsv_max_v: float = 0.10
    blur_p: float = 0.3
    blur_kernel: int = 3
    noise_p: float = 0.3
    noise_max_sigma: float = 0.02


def augment_train(sample: Sample, rng: np.random.Generator,
                  cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Randomly transformed copy of a training sample. Every probabilistic
    gate draws from `rng` whether or not it fires, so the draw sequence is
    stable; with all probabilities at zero the sample is returned unchanged
    (up to a copy)."""
    image = sample.image.copy()
    mask = sample.mask.copy() if sample.mask is not None else None
    _, h, w = image.shape

    if rng.random() < cfg.dihedral_p:
        t = DIHEDRAL_TRANSFORMS[int(rng.integers(8))]
        image = t.apply(image)
        mask = t.apply(mask) if mask is not None else None
        _, h, w = image.shape

    if rng.random() < cfg.rrc_p:
        area = rng.uniform(cfg.rrc_scale_min, cfg.rrc_scale_max)
        frac = math.sqrt(area)
        ch = max(1, round(h * frac))
        cw = max(1, round(w * frac))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = _resize_chw(image[:, top:top + ch, left:left + cw], (h, w), order=1)
        if mask is not None:
            mask = _resize_chw(mask[:, top:top + ch, left:left + cw], (h, w), order=0)

    if rng.random() < cfg.affine_p:
        deg = rng.uniform(-cfg.affine_max_deg, cfg.affine_max_deg)
        ty = rng.uniform(-cfg.affine_max_translate, cfg.affine_max_translate) * h
        tx = rng.uniform(-cfg.affine_max_translate, cfg.affine_max_translate) * w
        image = _affine_chw(image, deg, tx, ty, order=1)
        if mask is not None:
            mask = _affine_chw(mask, deg, tx, ty, order=0)

    if rng.random() < cfg.hsv_p:
        hsv = _rgb_to_hsv(np.clip(image, 0.0, 1.0))
        hsv[0] = (hsv[0] + rng.uniform(-cfg.hsv_max_h, cfg.hsv_max_h)) % 1.0
        hsv[1] = np.clip(hsv[1] * (1.0 + rng.uniform(-cfg.hsv_max_s, cfg.hsv_max_s)), 0, 1)
        hsv[2] = np.clip(hsv[2] * (1.0 + rng.uniform(-cfg.hsv_max_v, cfg.hsv_max_v)), 0, 1)
        image = _hsv_to_rgb(hsv)

    if rng.random() < cfg.blur_p:
        k = cfg.blur_kernel
        image = np.stack([ndimage.median_filter(image[c], size=k, mode="nearest")
                          for c in range(image.shape[0])])

    if rng.random() < cfg.noise_p:
        sigma = rng.uniform(0.0, cfg.noise_max_sigma)
        image = image + rng.normal(0.0, sigma, size=image.shape)

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if mask is not None:
        mask = mask.astype(np.float32)
    return Sample(image, mask, sample.name)


# --------------------------------------------------------------------------
# Prediction, test-time augmentation, voting

def predict_probabilities(model, image: Tensor, patch_size: int = 224,
                          batch_size: int = 8) -> Tensor:
    """Stitched per-pixel foreground probabilities for one (1, 3, H, W)
    image, running the model on its tiled patches in eval mode."""
    patches, grid = extract_patches(image, patch_size)
    outputs: list[Tensor] = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        batch = Tensor(np.concatenate([p.data for p in chunk], axis=0))
        pred = model(batch, "eval")
        for k in range(pred.shape[0]):
            outputs.append(Tensor(np.ascontiguousarray(pred.data[k:k + 1])))
    return stitch_patches(outputs, grid)


def majority_vote(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-wise vote over k binary masks: foreground iff at least
    ceil(k/2) masks say foreground, so even-split ties go to foreground."""
    if not masks:
        raise ValueError("majority_vote needs at least one mask")
    stack = np.stack([np.asarray(m) for m in masks])
    if not np.isin(stack, (0, 1)).all():
        raise ValueError("majority_vote inputs must be binary 0/1 masks")
    need = math.ceil(len(masks) / 2)
    return (stack.sum(axis=0) >= need).astype(np.float32)


def tta_predict(model, image: Tensor,
                transforms: Sequence[DihedralTransform] = DIHEDRAL_TRANSFORMS,
                patch_size: int = 224, threshold: float = 0.5,
                batch_size: int = 8) -> Tensor:
    """Majority-vote mask over test-time transforms.

    Per transform: warp the image, tile into patches, run the model, stitch,
    invert the warp, binarize at `threshold`; then vote pixel-wise.
    """
    if not transforms:
        raise ValueError("tta_predict needs at least one transform")
    votes: list[np.ndarray] = []
    for t in transforms:
        warped = Tensor(t.apply(image.data))
        prob = predict_probabilities(model, warped, patch_size, batch_size)
        unwarped = t.inverse.apply(prob.data)
        votes.append(binarize_array(unwarped, threshold))
    return Tensor(majority_vote(votes))
