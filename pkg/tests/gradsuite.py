"""Central finite-difference checks for every differentiable op, at float64.

Each entry of ``CASES`` builds a random instance of one op from a numpy
Generator and returns ``(loss_fn, inputs)``. ``loss_fn`` contracts the op
output with a fixed random tensor so every output element matters.
"""
from __future__ import annotations

import math

import numpy as np

from spreadcast.numerics import (
    BatchNormStats,
    RngStream,
    Tensor,
    activation,
    add_noise,
    batch_norm,
    bce_with_logits,
    check_gradients,
    concat,
    conv3d,
    conv3d_transpose,
    conv_output_shape,
    crop_to,
    dropout,
    l1_loss,
    pad_to,
)

TOL = 1e-4
SHAPES_PER_OP = 20


def _t(rng, shape, lo=-1.0, hi=1.0, away_from=None):
    x = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        # keep clear of kinks so the finite difference never straddles one
        near = np.abs(x - away_from) < 0.05
        x[near] += np.where(x[near] >= away_from, 0.1, -0.1)
    return Tensor(x, requires_grad=True)


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _conv_case(rng, with_bias):
    n = int(rng.integers(1, 3))
    spatial = _shape(rng, 3, 1, 6)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kernel = _shape(rng, 3, 1, 4)
    strides = _shape(rng, 3, 1, 3)
    x = _t(rng, (n, *spatial, cin))
    k = _t(rng, (*kernel, cin, cout))
    b = _t(rng, (cout,)) if with_bias else None
    out_spatial = conv_output_shape(spatial, kernel, strides)
    w = Tensor(rng.normal(size=(n, *out_spatial, cout)))
    return (lambda: (conv3d(x, k, strides, b) * w).sum()), [x, k] + ([b] if with_bias else [])


def _deconv_case(rng, with_bias):
    n = int(rng.integers(1, 3))
    spatial = _shape(rng, 3, 1, 4)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kernel = _shape(rng, 3, 1, 4)
    strides = _shape(rng, 3, 1, 3)
    x = _t(rng, (n, *spatial, cin))
    k = _t(rng, (*kernel, cout, cin))
    b = _t(rng, (cout,)) if with_bias else None
    w = Tensor(rng.normal(size=(n, *(e * s for e, s in zip(spatial, strides)), cout)))
    return (lambda: (conv3d_transpose(x, k, strides, b) * w).sum()), [x, k] + ([b] if with_bias else [])


def _binary(op):
    def case(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        a = _t(rng, shape)
        # broadcast the second operand along a random subset of axes
        bshape = tuple(1 if rng.random() < 0.3 else s for s in shape)
        b = _t(rng, bshape, 0.5, 2.0) if op == "div" else _t(rng, bshape)
        w = Tensor(rng.normal(size=shape))
        f = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
        return (lambda: (f() * w).sum()), [a, b]
    return case


def _unary(kind):
    def case(rng):
        shape = _shape(rng, int(rng.integers(1, 5)))
        x = _t(rng, shape, -3, 3, away_from=0.0 if kind in ("relu", "leaky_relu") else None)
        w = Tensor(rng.normal(size=shape))
        return (lambda: (activation(x, kind) * w).sum()), [x]
    return case


def _reduce(kind):
    def case(rng):
        x = _t(rng, _shape(rng, int(rng.integers(1, 4))))
        if kind == "neg":
            w = Tensor(rng.normal(size=x.shape))
            return (lambda: ((-x) * w).sum()), [x]
        if kind == "sum":
            return (lambda: x.sum() * x.sum()), [x]
        return (lambda: x.mean() * x.mean()), [x]
    return case


def _reshape_case(rng):
    shape = _shape(rng, 3)
    x = _t(rng, shape)
    perm = rng.permutation(3)
    target = tuple(shape[i] for i in perm)
    w = Tensor(rng.normal(size=target))
    return (lambda: (x.reshape(target) * w).sum()), [x]


def _bn_case(mode):
    def case(rng):
        shape = (int(rng.integers(1, 3)), *_shape(rng, 3, 1, 3), int(rng.integers(1, 4)))
        if mode != "infer" and math.prod(shape[:-1]) < 2:
            shape = (2, *shape[1:])
        c = shape[-1]
        x = _t(rng, shape, -2, 2)
        g = _t(rng, (c,), 0.5, 1.5)
        b = _t(rng, (c,))
        stats = BatchNormStats(rng.normal(size=c), rng.uniform(0.5, 2.0, size=c))
        w = Tensor(rng.normal(size=shape))
        return (lambda: (batch_norm(x, g, b, mode, stats) * w).sum()), [x, g, b]
    return case


def _dropout_case(rng):
    shape = _shape(rng, 3, 2, 4)
    x = _t(rng, shape)
    stream = RngStream(int(rng.integers(0, 2**31)))
    w = Tensor(rng.normal(size=shape))
    # the same stream yields the same mask on every call
    return (lambda: (dropout(x, 0.5, stream, active=True) * w).sum()), [x]


def _noise_case(rng):
    shape = _shape(rng, 3)
    x = _t(rng, shape)
    stream = RngStream(int(rng.integers(0, 2**31)))
    w = Tensor(rng.normal(size=shape))
    return (lambda: (add_noise(x, 0.1, stream, active=True) * w).sum()), [x]


def _concat_case(rng):
    base = (int(rng.integers(1, 3)), *_shape(rng, 3, 1, 3))
    parts = [_t(rng, (*base, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(2, 4)))]
    w = Tensor(rng.normal(size=(*base, sum(p.shape[-1] for p in parts))))
    return (lambda: (concat(parts, axis=-1) * w).sum()), parts


def _crop_case(rng):
    spatial = _shape(rng, 3, 2, 6)
    target = tuple(int(rng.integers(1, s + 1)) for s in spatial)
    x = _t(rng, (1, *spatial, 2))
    w = Tensor(rng.normal(size=(1, *target, 2)))
    return (lambda: (crop_to(x, target) * w).sum()), [x]


def _pad_case(rng):
    spatial = _shape(rng, 3, 1, 4)
    target = tuple(s + int(rng.integers(0, 3)) for s in spatial)
    x = _t(rng, (1, *spatial, 2))
    w = Tensor(rng.normal(size=(1, *target, 2)))
    return (lambda: (pad_to(x, target) * w).sum()), [x]


def _bce_case(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    z = _t(rng, shape, -4, 4)
    t = _t(rng, shape, 0, 1)
    return (lambda: bce_with_logits(z, t)), [z, t]


def _l1_case(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    a = _t(rng, shape)
    b = Tensor(a.data + np.where(rng.random(shape) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, shape),
               requires_grad=True)
    return (lambda: l1_loss(a, b)), [a, b]


CASES = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "neg": _reduce("neg"),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "reshape": _reshape_case,
    "relu": _unary("relu"),
    "leaky_relu": _unary("leaky_relu"),
    "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"),
    "linear": _unary("linear"),
    "conv3d": lambda rng: _conv_case(rng, False),
    "conv3d+bias": lambda rng: _conv_case(rng, True),
    "conv3d_transpose": lambda rng: _deconv_case(rng, False),
    "conv3d_transpose+bias": lambda rng: _deconv_case(rng, True),
    "batch_norm/train": _bn_case("train"),
    "batch_norm/batch": _bn_case("batch"),
    "batch_norm/infer": _bn_case("infer"),
    "dropout": _dropout_case,
    "noise": _noise_case,
    "concat": _concat_case,
    "crop_to": _crop_case,
    "pad_to": _pad_case,
    "bce_with_logits": _bce_case,
    "l1_loss": _l1_case,
}


def run_op(name: str, seed: int = 0, shapes: int = SHAPES_PER_OP, max_coords: int = 24) -> list[float]:
    """Worst relative error for each of ``shapes`` random instances of op ``name``."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    errors = []
    for _ in range(shapes):
        fn, inputs = CASES[name](rng)
        errors.append(check_gradients(fn, inputs, max_coords=max_coords, rng=rng))
    return errors


def run_suite(seed: int = 0) -> dict[str, list[float]]:
    return {name: run_op(name, seed) for name in CASES}
