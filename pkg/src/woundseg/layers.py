"""Parameterized layers: thin owners of weights around the functional ops.

Each layer exposes `params()` for the optimizer/checkpoint, `buffers()` for
non-learnable state, and `flops(h, w)` returning (flops, out_h, out_w) under
the 2-flops-per-MAC convention with 1 op per element for normalization,
activations, and pooling.
"""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .optim import xavier_init
from .tensor import Parameter, Tensor


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: tuple[int, int], rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = True):
        self.name = name
        self.spec = ops.Conv2dSpec(in_channels, out_channels, kernel,
                                   stride=stride, padding=padding, groups=groups,
                                   has_bias=bias)
        kh, kw = kernel
        fan_in = (in_channels // groups) * kh * kw
        fan_out = (out_channels // groups) * kh * kw
        self.w = Parameter(xavier_init(self.spec.weight_shape, fan_in, fan_out, rng),
                           name=f"{name}.w")
        self.b: Optional[Parameter] = None
        if bias:
            self.b = Parameter(np.zeros((1, out_channels, 1, 1), np.float32),
                               name=f"{name}.b", adapt=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.spec, self.w, self.b)

    def params(self) -> Iterator[Parameter]:
        yield self.w
        if self.b is not None:
            yield self.b

    def flops(self, h: int, w: int) -> tuple[int, int, int]:
        ho, wo = ops.conv_out_hw(h, w, self.spec)
        out_elems = self.spec.out_channels * ho * wo
        kh, kw = self.spec.kernel
        macs = out_elems * (self.spec.in_channels // self.spec.groups) * kh * kw
        total = 2 * macs + (out_elems if self.spec.has_bias else 0)
        return total, ho, wo


class ConvTranspose2d:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: tuple[int, int], rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = True):
        self.name = name
        self.spec = ops.Conv2dSpec(in_channels, out_channels, kernel,
                                   stride=stride, padding=padding, groups=groups,
                                   has_bias=bias)
        kh, kw = kernel
        fan_in = (in_channels // groups) * kh * kw
        fan_out = (out_channels // groups) * kh * kw
        self.w = Parameter(xavier_init(self.spec.weight_shape, fan_in, fan_out, rng),
                           name=f"{name}.w")
        self.b: Optional[Parameter] = None
        if bias:
            self.b = Parameter(np.zeros((1, out_channels, 1, 1), np.float32),
                               name=f"{name}.b", adapt=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transpose_conv2d(x, self.spec, self.w, self.b)

    def params(self) -> Iterator[Parameter]:
        yield self.w
        if self.b is not None:
            yield self.b

    def flops(self, h: int, w: int) -> tuple[int, int, int]:
        ho, wo = ops.tconv_out_hw(h, w, self.spec)
        kh, kw = self.spec.kernel
        # One multiply per (input element, kernel tap, connected out channel):
        # the conv MAC formula evaluated on the adjoint direction.
        in_elems = self.spec.in_channels * h * w
        macs = in_elems * (self.spec.out_channels // self.spec.groups) * kh * kw
        out_elems = self.spec.out_channels * ho * wo
        total = 2 * macs + (out_elems if self.spec.has_bias else 0)
        return total, ho, wo


class BatchNorm2d:
    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 epsilon: float = 1e-5):
        self.name = name
        self.st = ops.BatchNormState(channels, momentum=momentum, epsilon=epsilon,
                                     name=name)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        self.st.mode = mode
        return ops.batchnorm2d(x, self.st)

    def params(self) -> Iterator[Parameter]:
        yield self.st.gamma
        yield self.st.beta

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.running_mean", self.st.running_mean
        yield f"{self.name}.running_var", self.st.running_var

    def set_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.st.running_mean = mean.astype(np.float32).reshape(self.st.running_mean.shape)
        self.st.running_var = var.astype(np.float32).reshape(self.st.running_var.shape)

    def flops(self, h: int, w: int) -> tuple[int, int, int]:
        return self.st.channels * h * w, h, w
