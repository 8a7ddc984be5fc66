"""Differentiable building blocks used by the generator and discriminator."""
from __future__ import annotations

import numpy as np

from .rng import RngStream
from .tensor import Tensor

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "linear")
LEAKY_SLOPE = 0.2


def activation(x: Tensor, kind: str, alpha: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    if kind == "linear":
        return x
    if kind == "relu":
        mask = d > 0
        return Tensor.from_op(d * mask, (x,), lambda g, needs=None: (g * mask,), "relu")
    if kind == "leaky_relu":
        slope = np.where(d > 0, 1.0, alpha).astype(d.dtype)
        return Tensor.from_op(d * slope, (x,), lambda g, needs=None: (g * slope,), "leaky_relu")
    if kind == "tanh":
        y = np.tanh(d)
        return Tensor.from_op(y, (x,), lambda g, needs=None: (g * (1.0 - y * y),), "tanh")
    if kind == "sigmoid":
        y = _sigmoid(d)
        return Tensor.from_op(y, (x,), lambda g, needs=None: (g * y * (1.0 - y),), "sigmoid")
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class BatchNormStats:
    """Running mean/variance of one batch-norm layer (mutated in train mode)."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = mean
        self.var = var

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> BatchNormStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
               stats: BatchNormStats | None = None, eps: float = 1e-5,
               momentum: float = 0.99) -> Tensor:
    """Normalize over every axis but the last (channels).

    In ``train`` mode batch statistics are used and, if ``stats`` is given,
    the running estimates are updated as ``m * running + (1 - m) * batch``.
    ``batch`` mode also normalizes with batch statistics but leaves ``stats``
    alone; ``infer`` mode uses ``stats`` as is.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"channel mismatch: input has {c} channels, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = tuple(range(x.ndim - 1))
    d = x.data
    if mode in ("train", "batch"):
        mu = d.mean(axis=axes)
        centered = d - mu
        var = (centered * centered).mean(axis=axes)
        if mode == "train" and stats is not None:
            stats.mean[...] = momentum * stats.mean + (1.0 - momentum) * mu
            stats.var[...] = momentum * stats.var + (1.0 - momentum) * var
    elif mode == "infer":
        if stats is None:
            raise ValueError("infer mode needs running statistics")
        mu = stats.mean.astype(d.dtype)
        var = stats.var.astype(d.dtype)
        centered = d - mu
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    m = d.size // c
    train = mode != "infer"

    def backward(g, needs=(True, True, True)):
        gg = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * gamma.data
            if train:
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


def dropout_mask(shape, rate: float, rng: RngStream, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: kept entries are ``1 / (1 - rate)``, dropped are 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.uniform(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate) if rate > 0 else np.ones(shape, dtype=dtype)


def dropout(x: Tensor, rate: float, rng: RngStream, active: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, rng, dtype=x.dtype.type)
    return Tensor.from_op(x.data * mask, (x,), lambda g, needs=None: (g * mask,), "dropout")


def add_noise(x: Tensor, sigma: float, rng: RngStream, active: bool = True) -> Tensor:
    """Additive Gaussian noise (the gradient passes straight through)."""
    if not active or sigma == 0.0:
        return x
    noise = rng.normal(x.shape, scale=sigma, dtype=x.dtype)
    return Tensor.from_op(x.data + noise, (x,), lambda g, needs=None: (g,), "noise")


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(ref, p.shape)) if i != ax):
            raise ValueError(f"concat shape mismatch off axis {ax}: {ref} vs {p.shape}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return Tensor.from_op(out, parts, lambda g, needs=None: tuple(np.split(g, bounds, axis=ax)), "concat",
                          check_finite=False)


def crop_to(x: Tensor, spatial) -> Tensor:
    """Center-crop axes 1..3 of a 5D tensor to ``spatial`` (odd surplus cut at the end)."""
    index = [slice(None)]
    for n, m in zip(x.shape[1:4], spatial):
        if m > n:
            raise ValueError(f"cannot crop extent {n} to {m}")
        start = (n - m) // 2
        index.append(slice(start, start + m))
    index.append(slice(None))
    index = tuple(index)
    if x.shape[1:4] == tuple(spatial):
        return x
    shape = x.shape

    def backward(g, needs=None):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index]), (x,), backward, "crop",
                          check_finite=False)


def pad_to(x: Tensor, spatial) -> Tensor:
    """Zero-pad axes 1..3 of a 5D tensor symmetrically up to ``spatial``."""
    if x.shape[1:4] == tuple(spatial):
        return x
    widths = [(0, 0)]
    for n, m in zip(x.shape[1:4], spatial):
        if m < n:
            raise ValueError(f"cannot pad extent {n} to {m}")
        widths.append(((m - n) // 2, m - n - (m - n) // 2))
    widths.append((0, 0))
    index = (slice(None),) + tuple(slice(b, b + n) for (b, _), n in zip(widths[1:4], x.shape[1:4])) + (slice(None),)
    return Tensor.from_op(np.pad(x.data, widths), (x,), lambda g, needs=None: (g[index],), "pad",
                          check_finite=False)
