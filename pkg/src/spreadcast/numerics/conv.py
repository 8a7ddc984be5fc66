"""3D convolution and its adjoint on channels-last tensors.

Layout is ``(N, D, H, W, C)`` for activations and ``(kd, kh, kw, Cin, Cout)``
for kernels. Padding is "same" in ceil mode: the output extent along each axis
is ``ceil(n / stride)`` and the zero padding needed to get there is split
evenly, with the odd element on the trailing side.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Tensor


def same_padding(n: int, k: int, s: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one axis."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    before = total // 2
    return out, before, total - before


def conv_output_shape(spatial, kernel, strides) -> tuple[int, ...]:
    return tuple(same_padding(n, k, s)[0] for n, k, s in zip(spatial, kernel, strides))


def _geometry(spatial, kernel, strides):
    outs, pads = [], []
    for n, k, s in zip(spatial, kernel, strides):
        o, b, a = same_padding(n, k, s)
        outs.append(o)
        pads.append((b, a))
    return tuple(outs), tuple(pads)


def _offset_slices(a, b, c, strides, out_ext):
    sd, sh, sw = strides
    od, oh, ow = out_ext
    return (slice(None),
            slice(a, a + sd * (od - 1) + 1, sd),
            slice(b, b + sh * (oh - 1) + 1, sh),
            slice(c, c + sw * (ow - 1) + 1, sw))


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if any(sum(p) for p in pads):
        return np.pad(x, ((0, 0), *pads, (0, 0)))
    return x


def _im2col(x: np.ndarray, kernel, strides, pads, out_ext) -> np.ndarray:
    """Patches as a ``(N*D'*H'*W', kd*kh*kw*C)`` matrix matching the kernel layout."""
    n, c = x.shape[0], x.shape[-1]
    (od, oh, ow), (sd, sh, sw) = out_ext, strides
    win = sliding_window_view(_pad(x, pads), kernel, axis=(1, 2, 3))
    win = win[:, :sd * (od - 1) + 1:sd, :sh * (oh - 1) + 1:sh, :sw * (ow - 1) + 1:sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    return cols.reshape(n * od * oh * ow, math.prod(kernel) * c)


def _col2im(g2: np.ndarray, kmat: np.ndarray, in_shape, kernel, strides, pads, out_ext) -> np.ndarray:
    """Adjoint of :func:`_im2col` applied to ``g2 @ kmat.T`` without forming it whole.

    ``g2`` is ``(P, F)`` and ``kmat`` is ``(kd*kh*kw*C, F)``.
    """
    n, d_, h_, w_, c = in_shape
    kd, kh, kw = kernel
    (pd0, pd1), (ph0, ph1), (pw0, pw1) = pads
    k3 = kmat.reshape(kd * kh * kw, c, -1)
    gxp = np.zeros((n, d_ + pd0 + pd1, h_ + ph0 + ph1, w_ + pw0 + pw1, c),
                   dtype=np.result_type(g2, kmat))
    i = 0
    for a in range(kd):
        for b in range(kh):
            for d in range(kw):
                gxp[_offset_slices(a, b, d, strides, out_ext)] += (g2 @ k3[i].T).reshape(n, *out_ext, c)
                i += 1
    return gxp[:, pd0:pd0 + d_, ph0:ph0 + h_, pw0:pw0 + w_, :]


def _adjoint(g: np.ndarray, kmat: np.ndarray, in_shape, kernel, strides, pads) -> np.ndarray:
    """Input gradient of a convolution with kernel matrix ``kmat`` given output gradient ``g``.

    Padded input positions with the same residue modulo the stride form a
    phase; each phase is a stride-1 correlation of ``g`` with the matching
    sub-kernel taken in reverse, so the whole adjoint is a handful of dense
    matmuls. :func:`_col2im` computes the same thing the direct way.
    """
    n, c = in_shape[0], in_shape[-1]
    f = g.shape[-1]
    k5 = kmat.reshape(*kernel, c, f)
    padded = [e + b + a for e, (b, a) in zip(in_shape[1:4], pads)]
    reach = [-(-k // s) for k, s in zip(kernel, strides)]
    phase_len = [-(-p // s) for p, s in zip(padded, strides)]
    right = [max(q - o, 0) for q, o in zip(phase_len, g.shape[1:4])]
    gp = np.pad(g, ((0, 0), *((m - 1, r) for m, r in zip(reach, right)), (0, 0)))
    gxp = np.zeros((n, *(q * s for q, s in zip(phase_len, strides)), c), dtype=np.result_type(g, kmat))
    for phase in np.ndindex(*strides):
        sub_k = k5[phase[0]::strides[0], phase[1]::strides[1], phase[2]::strides[2]]
        taps = sub_k.shape[:3]
        if 0 in taps:
            continue
        start = [m - t for m, t in zip(reach, taps)]
        src = gp[:, start[0]:, start[1]:, start[2]:]
        ext = tuple(phase_len)
        cols = _im2col(src, taps, (1, 1, 1), ((0, 0),) * 3, ext)
        kf = sub_k[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3).reshape(-1, c)
        gxp[:, phase[0]::strides[0], phase[1]::strides[1], phase[2]::strides[2]] = \
            (cols @ kf).reshape(n, *ext, c)
    (d0, _), (h0, _), (w0, _) = pads
    d_, h_, w_ = in_shape[1:4]
    return gxp[:, d0:d0 + d_, h0:h0 + h_, w0:w0 + w_]


def _check(x: Tensor, k: Tensor, strides, cin_axis: int):
    if x.ndim != 5 or k.ndim != 5:
        raise ValueError(f"expected 5D input and kernel, got {x.shape} and {k.shape}")
    if len(strides) != 3 or any(int(s) < 1 for s in strides):
        raise ValueError(f"strides must be three positive ints, got {strides}")
    if x.shape[-1] != k.shape[cin_axis]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {k.shape[cin_axis]}")
    if 0 in x.shape:
        raise ValueError("zero-sized input")
    return tuple(int(s) for s in strides)


def conv3d(x: Tensor, k: Tensor, strides=(1, 1, 1), bias: Tensor | None = None) -> Tensor:
    strides = _check(x, k, strides, cin_axis=3)
    kernel = k.shape[:3]
    cout = k.shape[4]
    out_ext, pads = _geometry(x.shape[1:4], kernel, strides)
    cols = _im2col(x.data, kernel, strides, pads, out_ext)
    kmat = k.data.reshape(-1, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[0], *out_ext, cout)
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite output from conv3d")
    x_shape = x.shape

    def backward(g, needs=(True, True, True)):
        g2 = g.reshape(-1, cout)
        gx = _adjoint(g, kmat, x_shape, kernel, strides, pads) if needs[0] else None
        gk = (cols.T @ g2).reshape(k.shape) if needs[1] else None
        gb = g2.sum(axis=0) if bias is not None and needs[2] else None
        return gx, gk, gb

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor.from_op(out, parents, backward, "conv3d", check_finite=False)


def conv3d_transpose(x: Tensor, k: Tensor, strides=(1, 1, 1), bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv3d`; output extent is ``input extent * stride``.

    ``k`` has layout ``(kd, kh, kw, Cout, Cin)``: it is the kernel of the
    convolution that maps the (larger) output back onto the input.
    """
    strides = _check(x, k, strides, cin_axis=4)
    kernel = k.shape[:3]
    cout = k.shape[3]
    cin = k.shape[4]
    n = x.shape[0]
    out_spatial = tuple(e * s for e, s in zip(x.shape[1:4], strides))
    out_shape = (n, *out_spatial, cout)
    in_ext, pads = _geometry(out_spatial, kernel, strides)
    assert in_ext == x.shape[1:4]
    kmat = k.data.reshape(-1, cin)
    x2 = x.data.reshape(-1, cin)
    out = _adjoint(x.data, kmat, out_shape, kernel, strides, pads)
    if bias is not None:
        out = out + bias.data
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite output from conv3d_transpose")

    def backward(g, needs=(True, True, True)):
        gcols = _im2col(g, kernel, strides, pads, in_ext)
        gx = (gcols @ kmat).reshape(x.shape) if needs[0] else None
        gk = (gcols.T @ x2).reshape(k.shape) if needs[1] else None
        gb = g.reshape(-1, cout).sum(axis=0) if bias is not None and needs[2] else None
        return gx, gk, gb

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward, "conv3d_transpose",
                          check_finite=False)
