"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from prunemia.tensor import Tensor


def finite_difference_check(loss_fn, tensors, h: float = 1e-5, max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from the current tensor values.
    Relative error uses max(|a|, |n|, 1e-8) as the denominator, falling back
    to the absolute error when both gradients are tiny.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.array(t.grad, copy=True) for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) / scale if scale > 1e-6 else abs(a - numeric)
            worst = max(worst, err)
    return worst


def literal_ps(model, x: np.ndarray, noise: np.ndarray, eps: float) -> np.ndarray:
    """PS_c = (1/n) sum_i |f(x + eps d_i)_c - f(x)_c| / eps, looped literally."""
    base = model(x[None, :])[0]
    total = np.zeros_like(base)
    for d in noise:
        total += np.abs(model((x + eps * d)[None, :])[0] - base) / eps
    return total / len(noise)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
