"""Shared test fixtures: the central-difference gradient checker, seeded
generators, and hypothesis settings tuned for a fast suite."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from woundseg import Tape, Tensor

settings.register_profile(
    "suite", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


def rand_tensor(rng: np.random.Generator, shape, scale: float = 1.0,
                requires_grad: bool = True, dtype=np.float64,
                offset: float = 0.0) -> Tensor:
    data = (rng.standard_normal(shape) * scale + offset).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def int_tensor(rng: np.random.Generator, shape, lo: int = -3, hi: int = 4,
               requires_grad: bool = False, dtype=np.float64) -> Tensor:
    """Integer-valued tensor: float ops on small integers are exact, so
    oracle comparisons can demand bit equality."""
    return Tensor(rng.integers(lo, hi, size=shape).astype(dtype),
                  requires_grad=requires_grad)


def fd_check(build, tensors, rtol: float = 1e-4, h: float = 1e-4,
             max_entries: int = 600) -> float:
    """Compare tape gradients of scalar `build(*tensors)` against central
    finite differences at 64-bit. Returns the worst relative error seen.

    Gradients accumulate additively, so stale .grad from earlier checks is
    cleared before the backward pass.
    """
    for t in tensors:
        assert t.dtype == np.float64, "finite differences need float64 inputs"
        t.grad = None
    with Tape() as tape:
        out = build(*tensors)
        tape.backward(out)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            assert t.grad is None
            continue
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.shape[0]
        idxs = range(n) if n <= max_entries else \
            np.linspace(0, n - 1, max_entries).astype(int)
        gflat = grad.reshape(-1)
        for i in idxs:
            save = flat[i]
            flat[i] = save + h
            f_plus = float(build(*tensors).data.reshape(()))
            flat[i] = save - h
            f_minus = float(build(*tensors).data.reshape(()))
            flat[i] = save
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at flat index {i}: analytic={analytic!r} "
                f"numeric={numeric!r} rel={rel:.3e}")
    return worst


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
