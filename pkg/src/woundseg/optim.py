"""Layer-wise adaptive optimizer (LAMB) and Xavier-uniform initialization."""
from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

from .tensor import NumericError, Parameter


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int,
                rng: Union[int, np.random.Generator]) -> np.ndarray:
    """Uniform samples on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    For convolutions the fans include the kernel area and the group divisor:
    fan_in = (C_in / groups) * kh * kw, fan_out = (C_out / groups) * kh * kw.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be positive, got fan_in={fan_in} fan_out={fan_out}")
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)


class Lamb:
    """LAMB: Adam-style moments with a per-parameter trust ratio.

    Update per parameter w with gradient g at step t:
        m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
        mhat = m / (1 - b1^t)       vhat = v / (1 - b2^t)
        u = mhat / (sqrt(vhat) + eps) + wd*w
        r = ||w|| / ||u||   (1 if either norm is 0, or if the parameter
                             is flagged adapt=False: biases, norm scales,
                             gating scalars)
        w <- w - lr * r * u

    A non-finite gradient on any parameter rejects the whole step: no
    state, parameter, or step counter changes.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
                 weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = {}
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient for parameter {p.name!r}; step rejected")
            grads[p.name] = g
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update += self.weight_decay * p.data
            if p.adapt:
                w_norm = float(np.linalg.norm(p.data))
                u_norm = float(np.linalg.norm(update))
                ratio = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
            else:
                ratio = 1.0
            p.data = (p.data - self.lr * ratio * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the optimizer state for checkpointing."""
        out = {"opt/t": np.full((1, 1, 1, 1), float(self.t), np.float32)}
        for name in self.m:
            out[f"opt/{name}.m"] = self.m[name]
            out[f"opt/{name}.v"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt/t"].reshape(()))
        for p in self.params:
            self.m[p.name] = arrays[f"opt/{p.name}.m"].astype(np.float32).reshape(p.shape)
            self.v[p.name] = arrays[f"opt/{p.name}.v"].astype(np.float32).reshape(p.shape)
