"""Scalar training objectives."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _as_leaf(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


def _same_shape(a: Tensor, b, name: str) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape))
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return b


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits.

    Uses ``max(z, 0) - z*t + log1p(exp(-|z|))``, finite for any finite ``z``.
    """
    logits = _as_leaf(logits)
    targets = _same_shape(logits, targets, "bce_with_logits")
    z, t = logits.data, targets.data
    if t.min() < 0 or t.max() > 1:
        raise ValueError("targets must lie in [0, 1]")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    value = np.asarray(loss.mean(), dtype=z.dtype)

    def backward(g, needs=None):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        gz = (g / n) * (sig - t)
        gt = (g / n) * (-z) if targets.requires_grad else None
        return gz.astype(z.dtype, copy=False), gt

    return Tensor.from_op(value, (logits, targets), backward, "bce_with_logits")


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference; the subgradient at ties is 0."""
    a = _as_leaf(a)
    b = _same_shape(a, b, "l1_loss")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def backward(g, needs=None):
        ga = (g / n) * sign
        return ga, (-ga if b.requires_grad else None)

    return Tensor.from_op(np.asarray(np.abs(diff).mean(), dtype=diff.dtype), (a, b), backward, "l1_loss")
