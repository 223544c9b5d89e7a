"""Residual-attention encoder-decoder for binary segmentation.

The architecture is fully declarative: `ModelConfig` pins widths, block
multiplicities, skip mode, and grouping, and the same machinery expresses
both the lightweight residual-attention network and the classic
concatenation-skip U-Net used as the accounting baseline.

Layout (resattn, sum skips): each encoder stage stacks residual attention
blocks and halves resolution with 2x2 max pooling between stages; each
decoder stage upsamples with a 2x2/stride-2 transposed convolution to the
matching encoder width, sums with that stage's output, and applies blocks.
A 1x1 convolution plus sigmoid maps the last decoder width to one channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d
from .tensor import Parameter, ShapeError, Tensor, add, mul


class ConfigError(ValueError):
    """Raised for invalid or inconsistent model/run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 1
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2, 2, 1)
    decoder_widths: tuple[int, ...] = (512, 256, 128, 64, 64)
    decoder_blocks: tuple[int, ...] = (1, 1, 1, 1, 1)
    block_kind: str = "resattn"
    skip_mode: str = "sum"
    group_base: int = 32
    grouped_upsample: bool = True
    attn_init: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        norm = lambda v: tuple(int(x) for x in v)  # noqa: E731
        object.__setattr__(self, "encoder_widths", norm(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", norm(self.decoder_widths))
        for name, count in (("blocks_per_stage", len(self.encoder_widths)),
                            ("decoder_blocks", len(self.decoder_widths))):
            v = getattr(self, name)
            v = (int(v),) * count if isinstance(v, int) else norm(v)
            object.__setattr__(self, name, v)
        self._validate()

    def _validate(self):
        w = self.encoder_widths
        if len(w) < 2:
            raise ConfigError(f"need at least two encoder stages, got {w}")
        if any(b > a * 2 or b != a * 2 for a, b in zip(w, w[1:])):
            raise ConfigError(f"encoder widths must double per stage, got {w}")
        if len(self.blocks_per_stage) != len(w):
            raise ConfigError(
                f"blocks_per_stage {self.blocks_per_stage} must match "
                f"{len(w)} encoder stages")
        if len(self.decoder_widths) != len(w) - 1:
            raise ConfigError(
                f"decoder_widths {self.decoder_widths} must have "
                f"{len(w) - 1} entries for {len(w)} encoder stages")
        if len(self.decoder_blocks) != len(self.decoder_widths):
            raise ConfigError("decoder_blocks must match decoder_widths")
        if any(b < 1 for b in self.blocks_per_stage + self.decoder_blocks):
            raise ConfigError("block multiplicities must be >= 1")
        if self.block_kind not in ("resattn", "double_conv"):
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.skip_mode not in ("sum", "concat"):
            raise ConfigError(f"unknown skip_mode {self.skip_mode!r}")
        if self.group_base < 1:
            raise ConfigError("group_base must be >= 1")
        if min(self.in_channels, self.out_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if not (0.0 < self.bn_momentum < 1.0) or self.bn_eps <= 0.0:
            raise ConfigError("bn_momentum must be in (0,1) and bn_eps > 0")

    @property
    def pool_factor(self) -> int:
        return 2 ** (len(self.encoder_widths) - 1)

    def groups_mid(self, f_out: int) -> int:
        return math.gcd(self.group_base, f_out)

    def upsample_groups(self, in_ch: int, out_ch: int) -> int:
        if not self.grouped_upsample:
            return 1
        return math.gcd(self.group_base, math.gcd(in_ch, out_ch))


def default_config() -> ModelConfig:
    return ModelConfig()


def vanilla_unet_config() -> ModelConfig:
    """Classic concatenation-skip U-Net (64..1024, plain double 3x3 conv
    blocks with biases and ReLU, no normalization), used as the accounting
    reference."""
    return ModelConfig(
        encoder_widths=(64, 128, 256, 512, 1024),
        blocks_per_stage=(1, 1, 1, 1, 1),
        decoder_widths=(512, 256, 128, 64),
        decoder_blocks=(1, 1, 1, 1),
        block_kind="double_conv",
        skip_mode="concat",
        group_base=1,
        grouped_upsample=False,
    )


def reduced_config(widths: tuple[int, ...] = (8, 16, 32),
                   blocks_per_stage: int | tuple[int, ...] = 2) -> ModelConfig:
    """Desk-scale residual-attention config; decoder widths mirror the
    encoder below the bottleneck."""
    widths = tuple(int(x) for x in widths)
    return ModelConfig(
        encoder_widths=widths,
        blocks_per_stage=blocks_per_stage,
        decoder_widths=tuple(reversed(widths[:-1])),
        decoder_blocks=(1,) * (len(widths) - 1),
    )


# --------------------------------------------------------------------------
# Config <-> flat key=value text (embedded in checkpoints)

_TUPLE_FIELDS = {"encoder_widths", "blocks_per_stage", "decoder_widths", "decoder_blocks"}
_BOOL_FIELDS = {"grouped_upsample"}


def model_config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            out[f.name] = ",".join(str(x) for x in v)
        elif f.name in _BOOL_FIELDS:
            out[f.name] = "true" if v else "false"
        else:
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
    return out


def model_config_from_kv(kv: dict[str, str]) -> ModelConfig:
    known = {f.name: f for f in fields(ModelConfig)}
    unknown = sorted(set(kv) - set(known))
    if unknown:
        raise ConfigError(f"unknown model config keys: {unknown}")
    args = {}
    for name, raw in kv.items():
        if name in _TUPLE_FIELDS:
            args[name] = tuple(int(x) for x in raw.split(",") if x.strip())
        elif name in _BOOL_FIELDS:
            if raw.lower() not in ("true", "false"):
                raise ConfigError(f"{name} must be true/false, got {raw!r}")
            args[name] = raw.lower() == "true"
        elif name in ("block_kind", "skip_mode"):
            args[name] = raw
        elif name in ("attn_init", "bn_momentum", "bn_eps"):
            args[name] = float(raw)
        else:
            args[name] = int(raw)
    return ModelConfig(**args)


# --------------------------------------------------------------------------
# Blocks

class ResAttnBlock:
    """Residual attention block.

    Main path: 1x1 conv -> BN -> GELU -> grouped 3x3 conv -> BN -> GELU ->
    1x1 conv -> BN -> GELU. The residual path R is the identity when
    f_in == f_out, otherwise a biased 1x1 convolution. The output is

        F_conv + alpha * (R . channel_attention(R))
               + beta  * (R . spatial_attention(R))

    with learnable scalars alpha, beta. Convolutions followed by BN carry
    no bias.
    """

    def __init__(self, name: str, f_in: int, f_out: int, groups_mid: int,
                 rng: np.random.Generator, attn_init: float = 1.0,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        if f_out % groups_mid:
            raise ConfigError(f"{name}: groups_mid={groups_mid} must divide f_out={f_out}")
        self.name = name
        self.f_in, self.f_out = f_in, f_out
        self.conv1 = Conv2d(f"{name}.conv1", f_in, f_out, (1, 1), rng, bias=False)
        self.bn1 = BatchNorm2d(f"{name}.bn1", f_out, bn_momentum, bn_eps)
        self.conv2 = Conv2d(f"{name}.conv2", f_out, f_out, (3, 3), rng,
                            padding=1, groups=groups_mid, bias=False)
        self.bn2 = BatchNorm2d(f"{name}.bn2", f_out, bn_momentum, bn_eps)
        self.conv3 = Conv2d(f"{name}.conv3", f_out, f_out, (1, 1), rng, bias=False)
        self.bn3 = BatchNorm2d(f"{name}.bn3", f_out, bn_momentum, bn_eps)
        self.res_conv: Optional[Conv2d] = None
        if f_in != f_out:
            self.res_conv = Conv2d(f"{name}.res", f_in, f_out, (1, 1), rng, bias=True)
        self.alpha = Parameter(np.full((1, 1, 1, 1), attn_init, np.float32),
                               name=f"{name}.alpha", adapt=False)
        self.beta = Parameter(np.full((1, 1, 1, 1), attn_init, np.float32),
                              name=f"{name}.beta", adapt=False)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ops.gelu(self.bn1(self.conv1(x), mode))
        h = ops.gelu(self.bn2(self.conv2(h), mode))
        f_conv = ops.gelu(self.bn3(self.conv3(h), mode))
        r = self.res_conv(x) if self.res_conv is not None else x
        f_c = ops.channel_attention(r)
        f_s = ops.spatial_attention(r)
        gated = add(f_conv, mul(mul(r, f_c), self.alpha))
        return add(gated, mul(mul(r, f_s), self.beta))

    def params(self) -> Iterator[Parameter]:
        for conv in (self.conv1, self.conv2, self.conv3):
            yield from conv.params()
        for bn in (self.bn1, self.bn2, self.bn3):
            yield from bn.params()
        if self.res_conv is not None:
            yield from self.res_conv.params()
        yield self.alpha
        yield self.beta

    def buffers(self):
        for bn in (self.bn1, self.bn2, self.bn3):
            yield from bn.buffers()

    def bn_layers(self):
        yield from (self.bn1, self.bn2, self.bn3)

    def rows(self, h: int, w: int) -> list[tuple[str, str, int, int]]:
        """(name, kind, params, flops) per internal layer at spatial h x w."""
        out = []
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2),
                         (self.conv3, self.bn3)):
            cf, _, _ = conv.flops(h, w)
            out.append((conv.name, "conv", conv.spec.param_count(), cf))
            bf, _, _ = bn.flops(h, w)
            out.append((bn.name, "bn", 2 * self.f_out, bf + self.f_out * h * w))  # +gelu
        if self.res_conv is not None:
            rf, _, _ = self.res_conv.flops(h, w)
            out.append((self.res_conv.name, "conv", self.res_conv.spec.param_count(), rf))
        elems = self.f_out * h * w
        # channel attention (max+sigmoid), spatial attention (mean+softmax),
        # two gated products with their scalar scales, two sums: ~1 op/elem each.
        attn_flops = 2 * elems + 3 * h * w + 6 * elems
        out.append((f"{self.name}.attn", "attn", 2, attn_flops))
        return out


class DoubleConvBlock:
    """Two biased 3x3 convolutions with ReLU, the classic U-Net stage body."""

    def __init__(self, name: str, f_in: int, f_out: int, rng: np.random.Generator):
        self.name = name
        self.f_out = f_out
        self.conv1 = Conv2d(f"{name}.conv1", f_in, f_out, (3, 3), rng, padding=1)
        self.conv2 = Conv2d(f"{name}.conv2", f_out, f_out, (3, 3), rng, padding=1)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.relu(self.conv2(ops.relu(self.conv1(x))))

    def params(self) -> Iterator[Parameter]:
        yield from self.conv1.params()
        yield from self.conv2.params()

    def buffers(self):
        return iter(())

    def bn_layers(self):
        return iter(())

    def rows(self, h: int, w: int) -> list[tuple[str, str, int, int]]:
        out = []
        for conv in (self.conv1, self.conv2):
            cf, _, _ = conv.flops(h, w)
            out.append((conv.name, "conv",
                        conv.spec.param_count(), cf + self.f_out * h * w))  # +relu
        return out


def _make_block(cfg: ModelConfig, name: str, f_in: int, f_out: int,
                rng: np.random.Generator):
    if cfg.block_kind == "resattn":
        return ResAttnBlock(name, f_in, f_out, cfg.groups_mid(f_out), rng,
                            attn_init=cfg.attn_init, bn_momentum=cfg.bn_momentum,
                            bn_eps=cfg.bn_eps)
    return DoubleConvBlock(name, f_in, f_out, rng)


# --------------------------------------------------------------------------
# Model

class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = cfg.encoder_widths

        self.enc_stages: list[list] = []
        prev = cfg.in_channels
        for i, width in enumerate(widths):
            stage = []
            for j in range(cfg.blocks_per_stage[i]):
                stage.append(_make_block(cfg, f"enc{i}.b{j}", prev, width, rng))
                prev = width
            self.enc_stages.append(stage)

        self.dec_stages: list[tuple[ConvTranspose2d, list]] = []
        cur = widths[-1]
        for j, block_width in enumerate(cfg.decoder_widths):
            partner = widths[-2 - j]
            up = ConvTranspose2d(f"dec{j}.up", cur, partner, (2, 2), rng, stride=2,
                                 groups=cfg.upsample_groups(cur, partner), bias=True)
            merged = partner * 2 if cfg.skip_mode == "concat" else partner
            blocks = []
            bin_ = merged
            for k in range(cfg.decoder_blocks[j]):
                blocks.append(_make_block(cfg, f"dec{j}.b{k}", bin_, block_width, rng))
                bin_ = block_width
            self.dec_stages.append((up, blocks))
            cur = block_width

        self.head = Conv2d("head", cur, cfg.out_channels, (1, 1), rng, bias=True)

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"model expects {self.cfg.in_channels} input channels, got {c}")
        f = self.cfg.pool_factor
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} must be divisible by {f} "
                             f"for {len(self.enc_stages)} encoder stages")
        skips: list[Tensor] = []
        cur = x
        for i, stage in enumerate(self.enc_stages):
            for block in stage:
                cur = block(cur, mode)
            if i < len(self.enc_stages) - 1:
                skips.append(cur)
                cur = ops.maxpool2d(cur)
        for (up, blocks), skip in zip(self.dec_stages, reversed(skips)):
            cur = up(cur)
            if cur.shape != skip.shape and self.cfg.skip_mode == "sum":
                raise ShapeError(f"skip mismatch: upsampled {cur.shape} vs "
                                 f"encoder {skip.shape}")
            cur = ops.concat_channels([skip, cur]) if self.cfg.skip_mode == "concat" \
                else add(cur, skip)
            for block in blocks:
                cur = block(cur, mode)
        return ops.sigmoid(self.head(cur))

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self.forward(x, mode)

    # -- parameter/state plumbing --------------------------------------------

    def _blocks(self):
        for stage in self.enc_stages:
            yield from stage
        for up, blocks in self.dec_stages:
            yield from blocks

    def params(self) -> Iterator[Parameter]:
        for stage in self.enc_stages:
            for block in stage:
                yield from block.params()
        for up, blocks in self.dec_stages:
            yield from up.params()
            for block in blocks:
                yield from block.params()
        yield from self.head.params()

    def named_params(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params()}

    def bn_layers(self):
        for block in self._blocks():
            yield from block.bn_layers()

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All learnables plus BN running statistics, keyed by name."""
        out = {p.name: p.data for p in self.params()}
        for block in self._blocks():
            for name, buf in block.buffers():
                out[name] = buf
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        shapes_own = {k: tuple(v.shape) for k, v in own.items()}
        shapes_new = {k: tuple(np.asarray(v).shape) for k, v in arrays.items()}
        bad = sorted(k for k in shapes_own if shapes_own[k] != shapes_new[k])
        if bad:
            raise ConfigError(
                "state shape mismatch: "
                + "; ".join(f"{k}: model {shapes_own[k]} vs checkpoint {shapes_new[k]}"
                            for k in bad))
        params = self.named_params()
        for name, p in params.items():
            p.data = arrays[name].astype(np.float32).reshape(p.shape)
        for block in self._blocks():
            for bn in block.bn_layers():
                bn.set_buffers(arrays[f"{bn.name}.running_mean"],
                               arrays[f"{bn.name}.running_var"])

    # -- accounting -----------------------------------------------------------

    def accounting(self, input_hw: tuple[int, int] = (224, 224)) -> list[tuple[str, str, int, int]]:
        """Per-layer (name, kind, params, flops) rows at the given input size,
        batch 1, under the 2-flops-per-MAC convention."""
        h, w = input_hw
        f = self.cfg.pool_factor
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} must be divisible by {f}")
        rows: list[tuple[str, str, int, int]] = []
        widths = self.cfg.encoder_widths
        sizes: list[tuple[int, int]] = []
        for i, stage in enumerate(self.enc_stages):
            for block in stage:
                rows.extend(block.rows(h, w))
            if i < len(self.enc_stages) - 1:
                sizes.append((h, w))
                rows.append((f"enc{i}.pool", "pool", 0, widths[i] * h * w))
                h, w = h // 2, w // 2
        for j, (up, blocks) in enumerate(self.dec_stages):
            uf, h, w = up.flops(h, w)
            rows.append((up.name, "tconv", up.spec.param_count(), uf))
            if self.cfg.skip_mode == "sum":
                rows.append((f"dec{j}.skip", "sum", 0, up.spec.out_channels * h * w))
            for block in blocks:
                rows.extend(block.rows(h, w))
        hf, h, w = self.head.flops(h, w)
        rows.append((self.head.name, "conv", self.head.spec.param_count(),
                     hf + self.cfg.out_channels * h * w))  # +sigmoid
        return rows

    def flops_count(self, input_hw: tuple[int, int] = (224, 224)) -> int:
        return sum(r[3] for r in self.accounting(input_hw))


def model_forward(model: Model, x: Tensor, mode: str) -> Tensor:
    return model.forward(x, mode)


def param_count(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars (BN running stats excluded,
    attention gating scalars included)."""
    return Model(cfg, seed=0).param_count()


def flops_count(cfg: ModelConfig, input_hw: tuple[int, int] = (224, 224)) -> int:
    """Forward cost for batch 1 at input_hw: 2 flops per conv MAC, 1 op per
    element for BN, activations, pooling, attention, and merges."""
    return Model(cfg, seed=0).flops_count(input_hw)
