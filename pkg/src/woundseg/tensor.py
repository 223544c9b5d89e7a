"""4-d NCHW tensors with tape-based reverse-mode differentiation.

Every tensor in the engine has an explicit (N, C, H, W) shape; vectors and
scalars are carried as degenerate 4-d shapes such as (1, C, 1, 1). Operations
executed while a Tape is active are recorded in execution order, which is a
valid topological order by construction, and `backward` replays the records
once, in reverse.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_debug_checks = False


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when debug checks spot a non-finite value in an op output."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (nesting, empty backward, non-scalar loss)."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle hard errors on NaN/Inf op outputs. Off by default: release
    mode propagates non-finite values silently."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """A 4-d float array, optionally participating in gradient tracking.

    `grad` is lazily allocated by the backward pass and accumulates
    additively across multiple uses of the tensor in a graph.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensor data must be 4-d NCHW, got shape {arr.shape}")
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(FLOAT32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar; the named functions below carry the contracts.
    def __add__(self, other): return add(self, _coerce(other, self))
    def __radd__(self, other): return add(self, _coerce(other, self))
    def __mul__(self, other): return mul(self, _coerce(other, self))
    def __rmul__(self, other): return mul(self, _coerce(other, self))
    def __sub__(self, other): return add(self, neg(_coerce(other, self)))
    def __truediv__(self, other): return div(self, _coerce(other, self))
    def __neg__(self): return neg(self)


class Parameter(Tensor):
    """Learnable tensor with a name and an optimizer-adaptation flag.

    `adapt=False` marks 1-d-like parameters (biases, norm scales, gating
    scalars) that take trust ratio 1 in layer-wise adaptive optimizers.
    """

    __slots__ = ("name", "adapt")

    def __init__(self, data, name: str, adapt: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adapt = bool(adapt)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, adapt={self.adapt})"


def from_array(values, dtype=FLOAT32, requires_grad: bool = False) -> Tensor:
    """Lift an array-like of rank <= 4 into a 4-d tensor, left-padding the
    shape with singleton axes: (H, W) becomes (1, 1, H, W)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim > 4:
        raise ShapeError(f"cannot lift rank-{arr.ndim} array to NCHW")
    arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return Tensor(arr, requires_grad=requires_grad)


def scalar(value: float, dtype=FLOAT32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype), requires_grad=requires_grad)


def zeros(shape: Sequence[int], dtype=FLOAT32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def ones(shape: Sequence[int], dtype=FLOAT32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return scalar(float(value), dtype=like.dtype)


# --------------------------------------------------------------------------
# Tape

VjpRule = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so the list is topologically
    sorted: an op's inputs always precede it. `backward` walks the list in
    reverse exactly once and then clears it.
    """

    _current: Optional["Tape"] = None

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], VjpRule]] = []

    def __enter__(self) -> "Tape":
        if Tape._current is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        Tape._current = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._current = None

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VjpRule) -> None:
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every recorded tensor that
        requires grad. The loss must be scalar-shaped (1,1,1,1)."""
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"loss must be scalar-shaped (1,1,1,1), got {loss.shape}")
        if not self._ops:
            raise TapeError("backward on an empty tape")
        seed = np.ones((1, 1, 1, 1), dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, inputs, vjp in reversed(self._ops):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        self._ops.clear()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    tape = tape if tape is not None else Tape._current
    if tape is None:
        raise TapeError("backward needs an active tape or an explicit one")
    tape.backward(loss)


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: VjpRule,
            op_name: str) -> Tensor:
    """Wrap an op result, run debug checks, and record the vjp if a tape is
    active and any input is tracked."""
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite value produced by {op_name}")
    out = Tensor(out_data)
    tape = Tape._current
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


# --------------------------------------------------------------------------
# Broadcasting discipline

def _broadcast_allowed(a_shape, b_shape) -> bool:
    """b may equal a, be a per-channel vector (*,C,1,1), a per-sample spatial
    map (*,1,H,W), or a scalar (1,1,1,1); * is 1 or a's batch size."""
    if a_shape == b_shape:
        return True
    n, c, h, w = a_shape
    return b_shape in ((1, c, 1, 1), (n, c, 1, 1), (1, 1, h, w), (n, 1, h, w), (1, 1, 1, 1))


def _check_binary(a: Tensor, b: Tensor, op_name: str) -> None:
    if not _broadcast_allowed(a.shape, b.shape):
        raise ShapeError(
            f"{op_name}: shape {b.shape} does not broadcast to {a.shape}; "
            "allowed: equal shapes, (*,C,1,1) channel vectors, (*,1,H,W) "
            "spatial maps, (1,1,1,1) scalars"
        )
    if a.dtype != b.dtype:
        raise ShapeError(f"{op_name}: dtype mismatch {a.dtype} vs {b.dtype}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast, back to `shape`."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] > 1)
    return grad.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------
# Element ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def vjp(g: np.ndarray):
        return g, _reduce_to(g, b.shape)

    return _finish(a.data + b.data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    a_data, b_data = a.data, b.data

    def vjp(g: np.ndarray):
        return g * b_data, _reduce_to(g * a_data, b.shape)

    return _finish(a_data * b_data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "div")
    a_data, b_data = a.data, b.data

    def vjp(g: np.ndarray):
        return g / b_data, _reduce_to(-g * a_data / (b_data * b_data), b.shape)

    return _finish(a_data / b_data, (a, b), vjp, "div")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Dispatching form of the binary element ops: kind in {'add', 'mul'}."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"elementwise kind must be 'add' or 'mul', got {kind!r}")


def neg(a: Tensor) -> Tensor:
    def vjp(g: np.ndarray):
        return (-g,)

    return _finish(-a.data, (a,), vjp, "neg")


def log(a: Tensor) -> Tensor:
    """Natural log. Non-positive inputs yield non-finite values, which are a
    hard error under debug checks."""
    a_data = a.data

    def vjp(g: np.ndarray):
        return (g / a_data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a_data)
    return _finish(out, (a,), vjp, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; the gradient passes through the interior
    and is zero where the clamp engaged."""
    a_data = a.data
    mask = ((a_data > lo) & (a_data < hi)).astype(a_data.dtype)

    def vjp(g: np.ndarray):
        return (g * mask,)

    return _finish(np.clip(a_data, lo, hi), (a,), vjp, "clip")


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g, shape).astype(dt, copy=True),)

    return _finish(a.data.sum(dtype=dt).reshape(1, 1, 1, 1), (a,), vjp, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    n = a.size

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g / n, shape).astype(dt, copy=True),)

    return _finish(a.data.mean(dtype=dt).reshape(1, 1, 1, 1), (a,), vjp, "mean_all")
