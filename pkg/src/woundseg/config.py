"""Experiment configuration: a flat key=value text format covering the
training loop, augmentation gates, and (under the ``model.`` prefix) the
architecture. Unknown keys are rejected so typos fail loudly, and the
fully resolved configuration is written next to every run's outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import AugmentConfig
from .model import ConfigError, ModelConfig, model_config_from_kv, model_config_to_kv


@dataclass(frozen=True)
class RunConfig:
    lr: float = 0.001
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 100
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    threshold: float = 0.5
    patch_size: int = 224
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.patch_size % self.model.pool_factor:
            raise ConfigError(
                f"patch_size {self.patch_size} must be divisible by the model's "
                f"pooling factor {self.model.pool_factor}")
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ConfigError("loss weights must be >= 0")


_RUN_FLOAT = {"lr", "weight_decay", "lambda_bce", "lambda_dice", "threshold"}
_RUN_INT = {"batch_size", "epochs", "patch_size", "seed"}
_AUG_INT = {"blur_kernel"}


def run_config_to_kv(cfg: RunConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(cfg):
        if f.name in ("augment", "model"):
            continue
        v = getattr(cfg, f.name)
        out[f.name] = repr(v) if isinstance(v, float) else str(v)
    for f in fields(cfg.augment):
        v = getattr(cfg.augment, f.name)
        out[f"aug_{f.name}"] = repr(v) if isinstance(v, float) else str(v)
    for k, v in model_config_to_kv(cfg.model).items():
        out[f"model.{k}"] = v
    return out


def run_config_from_kv(kv: dict[str, str]) -> RunConfig:
    run_kv: dict[str, str] = {}
    aug_kv: dict[str, str] = {}
    model_kv: dict[str, str] = {}
    for key, value in kv.items():
        if key.startswith("model."):
            model_kv[key[len("model."):]] = value
        elif key.startswith("aug_"):
            aug_kv[key[len("aug_"):]] = value
        else:
            run_kv[key] = value

    run_names = {f.name for f in fields(RunConfig)} - {"augment", "model"}
    aug_names = {f.name for f in fields(AugmentConfig)}
    unknown = sorted(set(run_kv) - run_names) + \
        sorted(f"aug_{k}" for k in set(aug_kv) - aug_names)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    run_args: dict[str, object] = {}
    for name, raw in run_kv.items():
        try:
            run_args[name] = float(raw) if name in _RUN_FLOAT else int(raw)
        except ValueError:
            raise ConfigError(f"bad value for {name}: {raw!r}") from None
    aug_args: dict[str, object] = {}
    for name, raw in aug_kv.items():
        try:
            aug_args[name] = int(raw) if name in _AUG_INT else float(raw)
        except ValueError:
            raise ConfigError(f"bad value for aug_{name}: {raw!r}") from None

    return RunConfig(**run_args, augment=AugmentConfig(**aug_args),
                     model=model_config_from_kv(model_kv))


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key=value` lines; blank lines and #-comments are ignored."""
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in kv:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        kv[key] = value.strip()
    return kv


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return run_config_from_kv(parse_kv_text(path.read_text(), source=path.name))


def save_run_config(path: str | Path, cfg: RunConfig) -> None:
    lines = [f"{k}={v}" for k, v in run_config_to_kv(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def override_run_config(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply non-None keyword overrides (CLI flags) onto a config."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **updates) if updates else cfg
