"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, index, rel_step: float = 1e-4) -> float:
    """d fn / d x[index] by central differences with a step relative to |x|."""
    orig = x.data[index]
    h = rel_step * max(1.0, abs(float(orig)))
    with no_grad():
        x.data[index] = orig + h
        fp = fn().item()
        x.data[index] = orig - h
        fm = fn().item()
    x.data[index] = orig
    return (fp - fm) / (2.0 * h)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], max_coords: int = 64,
                    rng: np.random.Generator | None = None, rel_step: float = 1e-4) -> float:
    """Return the worst relative error between autodiff and finite differences.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. For large
    inputs a random subset of ``max_coords`` coordinates is checked. The error
    for one input is ``|a - n| / max(|a|, |n|, 1e-8)`` measured in the
    Euclidean norm over the checked coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.size)
        if t.size > max_coords:
            flat = rng.choice(t.size, size=max_coords, replace=False)
        a = np.empty(len(flat))
        n = np.empty(len(flat))
        for j, f in enumerate(flat):
            idx = np.unravel_index(f, t.shape)
            a[j] = analytic[idx]
            n[j] = numeric_grad(fn, t, idx, rel_step)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
