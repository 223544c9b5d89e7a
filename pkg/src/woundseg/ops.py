"""Neural-network operators on NCHW tensors: convolution, transposed
convolution, batch normalization, activations, pooling, and the two
attention maps used by the residual attention block.

The convolution kernels loop over kernel offsets and issue one batched
matmul per offset, which keeps memory at input-size order instead of
materializing full im2col matrices. Backward rules recompute patch views
from the saved inputs rather than caching them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .tensor import Parameter, ShapeError, Tensor, _finish

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# --------------------------------------------------------------------------
# Convolution

@dataclass(frozen=True)
class Conv2dSpec:
    """Static description of a (transposed) convolution.

    The weight layout is (out_channels, in_channels // groups, kh, kw) for
    both directions; group i connects input block i to output block i.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.groups) < 1:
            raise ShapeError(f"conv spec fields must be positive: {self}")
        if self.padding < 0:
            raise ShapeError(f"conv padding must be >= 0: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    def param_count(self) -> int:
        return self.weight_count + (self.out_channels if self.has_bias else 0)


def conv_out_hw(h: int, w: int, spec: Conv2dSpec) -> tuple[int, int]:
    kh, kw = spec.kernel
    ho = (h + 2 * spec.padding - kh) // spec.stride + 1
    wo = (w + 2 * spec.padding - kw) // spec.stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty for input {h}x{w} with {spec}")
    return ho, wo


def tconv_out_hw(h: int, w: int, spec: Conv2dSpec) -> tuple[int, int]:
    kh, kw = spec.kernel
    ho = (h - 1) * spec.stride - 2 * spec.padding + kh
    wo = (w - 1) * spec.stride - 2 * spec.padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"transpose-conv output would be empty for {h}x{w} with {spec}")
    return ho, wo


def _check_conv_args(x: Tensor, spec: Conv2dSpec, w: Tensor, b: Optional[Tensor], name: str):
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if w.shape != spec.weight_shape:
        raise ShapeError(f"{name}: weight shape {w.shape} != spec {spec.weight_shape}")
    if spec.has_bias:
        if b is None or b.shape != (1, spec.out_channels, 1, 1):
            got = None if b is None else b.shape
            raise ShapeError(f"{name}: bias must be (1,{spec.out_channels},1,1), got {got}")
    elif b is not None:
        raise ShapeError(f"{name}: spec has no bias but one was passed")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _group_cols(x: np.ndarray, groups: int) -> np.ndarray:
    """(N, C, H, W) -> (groups, N*H*W, C//groups) contiguous matmul operand."""
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, c // groups, h, w)
    return np.ascontiguousarray(xg.transpose(1, 0, 3, 4, 2)).reshape(groups, n * h * w, -1)


def _uncols(cols: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(groups, N*H*W, Cg) -> (N, groups*Cg, H, W)."""
    g, _, cg = cols.shape
    out = cols.reshape(g, n, h, w, cg).transpose(1, 0, 4, 2, 3)
    return np.ascontiguousarray(out).reshape(n, g * cg, h, w)


def _conv_fwd(x: np.ndarray, w: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    n, _, h, win = x.shape
    kh, kw = spec.kernel
    s, g = spec.stride, spec.groups
    ho, wo = conv_out_hw(h, win, spec)
    xp = _pad_hw(x, spec.padding)
    xg = xp.reshape(n, g, spec.in_channels // g, *xp.shape[2:])
    wg = w.reshape(g, spec.out_channels // g, spec.in_channels // g, kh, kw)
    acc = np.zeros((g, n * ho * wo, spec.out_channels // g), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = xg[:, :, :, ki:ki + (ho - 1) * s + 1:s, kj:kj + (wo - 1) * s + 1:s]
            cols = np.ascontiguousarray(patch.transpose(1, 0, 3, 4, 2)).reshape(
                g, n * ho * wo, -1)
            acc += cols @ wg[:, :, :, ki, kj].transpose(0, 2, 1)
    return _uncols(acc, n, ho, wo)


def _conv_bwd(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: Conv2dSpec,
              need_x: bool, need_w: bool):
    n, _, h, win = x.shape
    kh, kw = spec.kernel
    s, g, p = spec.stride, spec.groups, spec.padding
    ho, wo = grad_out.shape[2:]
    go = _group_cols(grad_out, g)  # (g, N*Ho*Wo, Cout/g)
    xp = _pad_hw(x, p)
    xg = xp.reshape(n, g, spec.in_channels // g, *xp.shape[2:])
    wg = w.reshape(g, spec.out_channels // g, spec.in_channels // g, kh, kw)
    grad_x = grad_w = None
    if need_x:
        gxp = np.zeros_like(xp).reshape(n, g, spec.in_channels // g, *xp.shape[2:])
    if need_w:
        grad_w = np.zeros_like(w).reshape(g, spec.out_channels // g,
                                          spec.in_channels // g, kh, kw)
    for ki in range(kh):
        for kj in range(kw):
            hsl = slice(ki, ki + (ho - 1) * s + 1, s)
            wsl = slice(kj, kj + (wo - 1) * s + 1, s)
            if need_w:
                patch = xg[:, :, :, hsl, wsl]
                cols = np.ascontiguousarray(patch.transpose(1, 0, 3, 4, 2)).reshape(
                    g, n * ho * wo, -1)
                grad_w[:, :, :, ki, kj] = (cols.transpose(0, 2, 1) @ go).transpose(0, 2, 1)
            if need_x:
                gcols = go @ wg[:, :, :, ki, kj]  # (g, N*Ho*Wo, Cin/g)
                gpatch = gcols.reshape(g, n, ho, wo, -1).transpose(1, 0, 4, 2, 3)
                gxp[:, :, :, hsl, wsl] += gpatch
    if need_x:
        gxp = gxp.reshape(xp.shape)
        grad_x = gxp[:, :, p:p + h, p:p + win] if p else gxp
        grad_x = np.ascontiguousarray(grad_x)
    if need_w:
        grad_w = grad_w.reshape(w.shape)
    return grad_x, grad_w


def conv2d(x: Tensor, spec: Conv2dSpec, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Grouped 2-d cross-correlation with symmetric zero padding.

    Output spatial size is floor((H + 2p - kh) / stride) + 1 per side.
    """
    _check_conv_args(x, spec, w, b, "conv2d")
    out = _conv_fwd(x.data, w.data, spec)
    if spec.has_bias:
        out += b.data
    x_data, w_data = x.data, w.data
    inputs = (x, w, b) if spec.has_bias else (x, w)

    def vjp(g: np.ndarray):
        grad_x, grad_w = _conv_bwd(g, x_data, w_data, spec,
                                   need_x=x.requires_grad, need_w=w.requires_grad)
        grads = [grad_x, grad_w]
        if spec.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                         if b.requires_grad else None)
        return tuple(grads)

    return _finish(out, inputs, vjp, "conv2d")


def _tconv_fwd(x: np.ndarray, w: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    n, _, h, win = x.shape
    kh, kw = spec.kernel
    s, g, p = spec.stride, spec.groups, spec.padding
    ho, wo = tconv_out_hw(h, win, spec)
    hf, wf = (h - 1) * s + kh, (win - 1) * s + kw
    cols = _group_cols(x, g)  # (g, N*H*W, Cin/g)
    wg = w.reshape(g, spec.out_channels // g, spec.in_channels // g, kh, kw)
    full = np.zeros((n, g, spec.out_channels // g, hf, wf), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = cols @ wg[:, :, :, ki, kj].transpose(0, 2, 1)  # (g, N*H*W, Cout/g)
            contrib = contrib.reshape(g, n, h, win, -1).transpose(1, 0, 4, 2, 3)
            full[:, :, :, ki:ki + (h - 1) * s + 1:s, kj:kj + (win - 1) * s + 1:s] += contrib
    full = full.reshape(n, spec.out_channels, hf, wf)
    if p:
        full = np.ascontiguousarray(full[:, :, p:p + ho, p:p + wo])
    return full


def _tconv_bwd(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: Conv2dSpec,
               need_x: bool, need_w: bool):
    n, _, h, win = x.shape
    kh, kw = spec.kernel
    s, g, p = spec.stride, spec.groups, spec.padding
    gf = _pad_hw(grad_out, p)  # undo the output crop
    gfg = gf.reshape(n, g, spec.out_channels // g, *gf.shape[2:])
    wg = w.reshape(g, spec.out_channels // g, spec.in_channels // g, kh, kw)
    grad_x = grad_w = None
    if need_x:
        gx_acc = np.zeros((g, n * h * win, spec.in_channels // g), dtype=x.dtype)
    if need_w:
        cols = _group_cols(x, g)
        grad_w = np.zeros_like(w).reshape(g, spec.out_channels // g,
                                          spec.in_channels // g, kh, kw)
    for ki in range(kh):
        for kj in range(kw):
            gpatch = gfg[:, :, :, ki:ki + (h - 1) * s + 1:s, kj:kj + (win - 1) * s + 1:s]
            gcols = np.ascontiguousarray(gpatch.transpose(1, 0, 3, 4, 2)).reshape(
                g, n * h * win, -1)  # (g, N*H*W, Cout/g)
            if need_x:
                gx_acc += gcols @ wg[:, :, :, ki, kj]
            if need_w:
                grad_w[:, :, :, ki, kj] = gcols.transpose(0, 2, 1) @ cols
    if need_x:
        grad_x = _uncols(gx_acc, n, h, win)
    if need_w:
        grad_w = grad_w.reshape(w.shape)
    return grad_x, grad_w


def transpose_conv2d(x: Tensor, spec: Conv2dSpec, w: Tensor,
                     b: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    Output spatial size is (H - 1) * stride - 2p + kh per side; `padding`
    crops the scattered result symmetrically.
    """
    _check_conv_args(x, spec, w, b, "transpose_conv2d")
    out = _tconv_fwd(x.data, w.data, spec)
    if spec.has_bias:
        out += b.data
    x_data, w_data = x.data, w.data
    inputs = (x, w, b) if spec.has_bias else (x, w)

    def vjp(g: np.ndarray):
        grad_x, grad_w = _tconv_bwd(g, x_data, w_data, spec,
                                    need_x=x.requires_grad, need_w=w.requires_grad)
        grads = [grad_x, grad_w]
        if spec.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                         if b.requires_grad else None)
        return tuple(grads)

    return _finish(out, inputs, vjp, "transpose_conv2d")


# --------------------------------------------------------------------------
# Batch normalization

class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer.

    Running statistics are plain buffers, never touched by the optimizer.
    Both the batch and running variances are biased (divide by N*H*W).
    """

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 name: str = "bn"):
        self.channels = channels
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.gamma = Parameter(np.ones((1, channels, 1, 1), np.float32),
                               name=f"{name}.gamma", adapt=False)
        self.beta = Parameter(np.zeros((1, channels, 1, 1), np.float32),
                              name=f"{name}.beta", adapt=False)
        self.running_mean = np.zeros((1, channels, 1, 1), np.float32)
        self.running_var = np.ones((1, channels, 1, 1), np.float32)
        self.mode = "train"


def batchnorm2d(x: Tensor, st: BatchNormState) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with statistics of the current batch over
    (N, H, W) and blends them into the running buffers with st.momentum.
    Eval mode is the pure affine map x * gamma/sqrt(rv+eps) + (beta - rm *
    gamma/sqrt(rv+eps)), depending only on the running statistics.
    """
    if st.mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {st.mode!r}")
    if x.shape[1] != st.channels:
        raise ShapeError(f"batchnorm2d: input has {x.shape[1]} channels, state has {st.channels}")
    x_data = x.data
    gamma, beta = st.gamma, st.beta
    eps = np.asarray(st.epsilon, dtype=x_data.dtype)

    if st.mode == "eval":
        scale = (gamma.data / np.sqrt(st.running_var + eps)).astype(x_data.dtype)
        shift = (beta.data - st.running_mean * scale).astype(x_data.dtype)
        rm = st.running_mean
        rv = st.running_var

        def vjp_eval(g: np.ndarray):
            gx = g * scale if x.requires_grad else None
            if gamma.requires_grad:
                xhat = (x_data - rm) / np.sqrt(rv + eps)
                ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
            else:
                ggamma = None
            gbeta = (g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                     if beta.requires_grad else None)
            return gx, ggamma, gbeta

        return _finish(x_data * scale + shift, (x, gamma, beta), vjp_eval, "batchnorm2d")

    mean = x_data.mean(axis=(0, 2, 3), keepdims=True)
    var = x_data.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x_data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    mom = st.momentum
    st.running_mean = ((1.0 - mom) * st.running_mean + mom * mean).astype(np.float32)
    st.running_var = ((1.0 - mom) * st.running_var + mom * var).astype(np.float32)

    gamma_data = gamma.data

    def vjp_train(g: np.ndarray):
        if x.requires_grad:
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = gamma_data * inv_std * (g - g_mean - xhat * gx_mean)
        else:
            gx = None
        ggamma = ((g * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                  if gamma.requires_grad else None)
        gbeta = (g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                 if beta.requires_grad else None)
        return gx, ggamma, gbeta

    return _finish(out, (x, gamma, beta), vjp_train, "batchnorm2d")


# --------------------------------------------------------------------------
# Activations

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    x_data = x.data
    phi = 0.5 * (1.0 + erf(x_data * _INV_SQRT2))

    def vjp(g: np.ndarray):
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return (g * (phi + x_data * pdf),)

    return _finish(x_data * phi, (x,), vjp, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)

    def vjp(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _finish(out, (x,), vjp, "sigmoid")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    x_data = x.data
    mask = (x_data > 0).astype(x_data.dtype)

    def vjp(g: np.ndarray):
        return (g * mask,)

    return _finish(x_data * mask, (x,), vjp, "relu")


# --------------------------------------------------------------------------
# Pooling

def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; requires k == stride and H, W divisible
    by the stride. Backward routes the gradient to the first maximum in
    row-major window order on ties."""
    if k != stride:
        raise ShapeError(f"maxpool2d supports k == stride only, got k={k} stride={stride}")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: H={h}, W={w} must be divisible by stride={stride}")
    ho, wo = h // stride, w // stride
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(windows).reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=4)  # first occurrence wins ties (row-major window order)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def vjp(g: np.ndarray):
        gwin = np.zeros_like(flat)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=4)
        gx = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _finish(out, (x,), vjp, "maxpool2d")


# --------------------------------------------------------------------------
# Attention maps

def channel_attention(x: Tensor) -> Tensor:
    """Sigmoid of the per-channel global spatial maximum: (N, C, 1, 1).

    Ties route the backward gradient to the first maximum position in
    row-major order, matching the pooling policy.
    """
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    peak = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)
    out = _sigmoid_stable(peak)

    def vjp(g: np.ndarray):
        gpeak = (g * out * (1.0 - out)).reshape(n, c, 1)
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, :, None], gpeak, axis=2)
        return (gx.reshape(n, c, h, w),)

    return _finish(out, (x,), vjp, "channel_attention")


def spatial_attention(x: Tensor) -> Tensor:
    """Softmax over all H*W positions of the per-pixel channel mean:
    (N, 1, H, W), summing to 1 per sample.

    The max is subtracted before exponentiation, so the map is exactly
    invariant to constant shifts of the channel means.
    """
    n, c, h, w = x.shape
    cm = x.data.mean(axis=1, keepdims=True)  # (N, 1, H, W)
    flat = cm.reshape(n, h * w)
    z = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=1, keepdims=True)
    out = soft.reshape(n, 1, h, w)

    def vjp(g: np.ndarray):
        gflat = g.reshape(n, h * w)
        dot = (gflat * soft).sum(axis=1, keepdims=True)
        gz = soft * (gflat - dot)  # softmax jacobian-vector product
        gx = np.broadcast_to(gz.reshape(n, 1, h, w) / c, x.shape)
        return (gx.astype(x.dtype, copy=True),)

    return _finish(out, (x,), vjp, "spatial_attention")


# --------------------------------------------------------------------------
# Concatenation (channel axis), used by the concatenation-skip preset

def concat_channels(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (base[0], base[2], base[3]):
            raise ShapeError(
                f"concat_channels: non-channel dims differ: {t.shape} vs {base}")
    widths = [t.shape[1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def vjp(g: np.ndarray):
        return tuple(np.ascontiguousarray(g[:, edges[i]:edges[i + 1]])
                     for i in range(len(widths)))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return _finish(out, tuple(tensors), vjp, "concat_channels")
