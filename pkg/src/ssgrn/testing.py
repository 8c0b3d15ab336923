"""Finite-difference gradient checking.

The numeric side only ever calls the forward computation, so it stays an
independent oracle for whatever backward implementation it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(f: Callable[[], Tensor], wrt: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference d f / d wrt, elementwise, evaluated in place."""
    flat = wrt.data.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(wrt.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between backward grads of f() and central differences.

    ``f`` must rebuild the forward graph from the current tensor buffers on
    every call and return a scalar.
    """
    for t in wrt:
        t.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for t in wrt:
        if t.grad is None:
            raise AssertionError("no gradient reached a checked tensor")
        numeric = numeric_gradient(f, t, step=step)
        worst = max(worst, relative_error(t.grad.astype(np.float64), numeric))
    return worst


def sampled_gradient_check(
    f: Callable[[], Tensor],
    wrt: Tensor,
    n_samples: int,
    rng: np.random.Generator,
    step: float = 1e-5,
) -> float:
    """Like gradient_check but differencing only ``n_samples`` random elements
    of one tensor; used where a full sweep would be too slow."""
    wrt.zero_grad()
    out = f()
    out.backward()
    if wrt.grad is None:
        raise AssertionError("no gradient reached the checked tensor")
    flat = wrt.data.reshape(-1)
    gflat = wrt.grad.reshape(-1)
    picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
    worst = 0.0
    for i in picks:
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        analytic = float(gflat[i])
        denom = max(1.0, abs(analytic) + abs(numeric))
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
