"""Training loop: augmented patch pools, combined Dice+BCE objective,
layer-adaptive optimizer steps, per-epoch validation Dice, and best-so-far
checkpointing with a CSV history.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig, save_run_config
from .checkpoint import save_model
from .data import Sample, augment_train, extract_patches, predict_probabilities
from .losses import binarize_array, seg_loss
from .metrics import ConfusionCounts, count_confusion, metrics_from_counts
from .model import Model
from .optim import Lamb
from .tensor import NumericError, Tape, Tensor


@dataclass
class EpochStats:
    epoch: int
    seg_loss: float
    val_dsc: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_dsc: float = float("nan")
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def _check_samples(samples: Sequence[Sample], what: str) -> None:
    for s in samples:
        if s.mask is None:
            raise ValueError(f"{what} sample {s.name!r} has no mask")


def build_patch_pool(samples: Sequence[Sample], patch_size: int,
                     rng: Optional[np.random.Generator] = None,
                     augment=None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (P,3,s,s) image and (P,1,s,s) mask patch arrays for a list of
    samples, optionally augmenting each sample first."""
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    for s in samples:
        if augment is not None:
            s = augment_train(s, rng, augment)
        img_patches, _ = extract_patches(Tensor(s.image[None]), patch_size)
        msk_patches, _ = extract_patches(Tensor(s.mask[None]), patch_size)
        xs.extend(p.data for p in img_patches)
        ys.extend(p.data for p in msk_patches)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def validation_dice(model: Model, samples: Sequence[Sample], patch_size: int,
                    threshold: float = 0.5, batch_size: int = 8) -> float:
    """Micro-averaged Dice over full images: stitched probabilities are
    binarized and the confusion counts pooled across the whole set."""
    total = ConfusionCounts(0, 0, 0, 0)
    for s in samples:
        prob = predict_probabilities(model, Tensor(s.image[None]),
                                     patch_size, batch_size)
        pred = binarize_array(prob.data, threshold)
        total = total + count_confusion(pred, s.mask[None])
    return metrics_from_counts(total).dsc


def train(cfg: RunConfig, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample], out_dir: str | Path,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run the full training loop and leave behind, in `out_dir`:
    the resolved config, `history.csv` (epoch,seg_loss,dsc), `best.rseg`
    (highest validation Dice; falls back to the last epoch when there is no
    validation set) and `last.rseg`."""
    if not train_samples:
        raise ValueError("training needs at least one sample")
    _check_samples(train_samples, "training")
    _check_samples(val_samples, "validation")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(out_dir / "config_resolved.cfg", cfg)

    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg.model, seed=cfg.seed)
    opt = Lamb(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult()
    best_path = out_dir / "best.rseg"
    last_path = out_dir / "last.rseg"
    csv_path = out_dir / "history.csv"
    csv_lines = ["epoch,seg_loss,dsc"]
    say = log if log is not None else (lambda s: None)

    if cfg.epochs == 0:
        save_model(best_path, model, opt)
        save_model(last_path, model, opt)
        csv_path.write_text(csv_lines[0] + "\n")
        result.best_path, result.last_path = best_path, last_path
        say("epochs=0: wrote the initialized model without training")
        return result

    best_dsc = -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        xs, ys = build_patch_pool(train_samples, cfg.patch_size, rng, cfg.augment)
        order = rng.permutation(xs.shape[0])
        losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(np.ascontiguousarray(xs[idx]))
            y = Tensor(np.ascontiguousarray(ys[idx]))
            try:
                with Tape() as tape:
                    pred = model(x, "train")
                    loss = seg_loss(pred, y, cfg.lambda_bce, cfg.lambda_dice)
                    tape.backward(loss)
                loss_val = float(loss.data.reshape(()))
                if not np.isfinite(loss_val):
                    raise NumericError("non-finite training loss")
                opt.step()
            except NumericError as e:
                raise NumericError(
                    f"epoch {epoch}, step {start // cfg.batch_size + 1}: {e}") from e
            finally:
                opt.zero_grad()
            losses.append(loss_val)

        mean_loss = float(np.mean(losses))
        val_dsc = (validation_dice(model, val_samples, cfg.patch_size,
                                   cfg.threshold, cfg.batch_size)
                   if val_samples else float("nan"))
        result.history.append(EpochStats(epoch, mean_loss, val_dsc))
        csv_lines.append(f"{epoch},{mean_loss:.6f},{val_dsc:.6f}")
        csv_path.write_text("\n".join(csv_lines) + "\n")
        save_model(last_path, model, opt)
        result.last_path = last_path

        improved = (val_dsc > best_dsc) if val_samples else True
        if improved:
            best_dsc = val_dsc if val_samples else best_dsc
            result.best_epoch = epoch
            result.best_dsc = val_dsc
            save_model(best_path, model, opt)
            result.best_path = best_path
        say(f"epoch {epoch:3d}/{cfg.epochs}  seg_loss={mean_loss:.4f}  "
            f"val_dsc={val_dsc:.4f}  ({time.monotonic() - t0:.1f}s)"
            + ("  *" if improved and val_samples else ""))

    return result
