"""The 3D pix2pix generator (U-Net) and patch discriminator.

Architectures are plain data (:class:`ArchConfig`); parameters live in a flat
name -> tensor mapping so that they can be optimized, checkpointed and
compared without any module objects.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (
    BatchNormStats,
    RngStream,
    Tensor,
    activation,
    add_noise,
    batch_norm,
    concat,
    conv3d,
    conv3d_transpose,
    conv_output_shape,
    crop_to,
    dropout,
    pad_to,
)

WEIGHT_MAGIC = b"SPW1"
WEIGHT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ArchError(ValueError):
    """Invalid architecture: bad layer spec or a shape that does not round-trip."""


class WeightFileError(ValueError):
    """Corrupt or incompatible weight file."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv"
    filters: int
    kernel: tuple[int, int, int]
    strides: tuple[int, int, int]
    batch_norm: bool = True
    dropout: float | None = None
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.kind not in ("conv", "deconv"):
            raise ArchError(f"layer kind must be conv or deconv, got {self.kind!r}")
        if self.filters < 1:
            raise ArchError("filters must be >= 1")
        if len(self.kernel) != 3 or len(self.strides) != 3:
            raise ArchError("kernel and strides need three extents")
        if min(self.kernel) < 1 or min(self.strides) < 1:
            raise ArchError("kernel and stride extents must be >= 1")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))

    def out_spatial(self, spatial):
        if self.kind == "conv":
            return conv_output_shape(spatial, self.kernel, self.strides)
        return tuple(n * s for n, s in zip(spatial, self.strides))


@dataclass(frozen=True)
class ArchConfig:
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    output_layer: LayerSpec
    skip_pairs: tuple[tuple[int, int], ...]
    disc_layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int, int]
    noise_sigma: float = 0.1
    skip_mode: str = "crop"  # "crop" the decoder tensor or "pad" the encoder tensor
    inference_bn: str = "batch"  # "batch": per-cube statistics; "infer": running averages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        layers = lambda rows: tuple(LayerSpec(**{**r, "kernel": tuple(r["kernel"]), "strides": tuple(r["strides"])}) for r in rows)
        return cls(
            encoder=layers(d["encoder"]),
            decoder=layers(d["decoder"]),
            output_layer=layers([d["output_layer"]])[0],
            skip_pairs=tuple(tuple(p) for p in d["skip_pairs"]),
            disc_layers=layers(d["disc_layers"]),
            input_shape=tuple(d["input_shape"]),
            noise_sigma=float(d.get("noise_sigma", 0.1)),
            skip_mode=d.get("skip_mode", "crop"),
            inference_bn=d.get("inference_bn", "batch"),
        )


# Rows of the generator encoder and discriminator tables: (filters, kernel, strides).
GENERATOR_ENCODER_TABLE = (
    (16, (4, 4, 4), (2, 2, 2)),
    (32, (4, 4, 4), (1, 2, 2)),
    (64, (4, 4, 4), (1, 2, 2)),
    (128, (3, 4, 4), (1, 2, 2)),
    (128, (3, 4, 4), (1, 2, 2)),
    (256, (3, 4, 4), (1, 2, 2)),
    (256, (3, 4, 4), (1, 1, 1)),
)
GENERATOR_DECODER_TABLE = (
    (256, (3, 4, 4), (1, 1, 1)),
    (128, (3, 4, 4), (1, 2, 2)),
    (128, (3, 4, 4), (1, 2, 2)),
    (64, (4, 4, 4), (1, 2, 2)),
    (32, (4, 4, 4), (1, 2, 2)),
    (16, (4, 4, 4), (1, 2, 2)),
    (16, (4, 4, 4), (2, 1, 1)),
    (16, (4, 4, 4), (2, 1, 1)),
)
DISCRIMINATOR_TABLE = (
    (32, (4, 4, 4), (1, 2, 2)),
    (256, (4, 4, 4), (2, 2, 2)),
    (1, (4, 4, 4), (2, 1, 1)),
)


def _scaled(filters: int, width: float) -> int:
    return max(1, int(round(filters * width)))


def default_arch(input_shape=(16, 64, 128, 1), width: float = 1.0, ceil_mode: bool = False,
                 noise_sigma: float = 0.1, dropout_rate: float = 0.5, skip_mode: str = "crop",
                 output_kernel=(3, 3, 3), inference_bn: str = "batch") -> ArchConfig:
    """Generator and discriminator built from the reference layer tables above.

    The encoder and discriminator rows are used verbatim (``width`` scales
    every filter count, 1.0 keeps the tables). The decoder mirrors the encoder
    strides in reverse so the output has the input's shape, taking filter
    counts and kernels from the decoder table row by row, and ends with a
    1-filter tanh convolution (stride 1, kernel ``output_kernel``).

    Without ``ceil_mode`` the spatial extents must be divisible by 2**6 and
    time by 2; with it any extents are accepted and odd skips are cropped.
    """
    t, h, w, c = input_shape
    if c != 1:
        raise ArchError("the default architecture expects a single input channel")
    if not ceil_mode and (h % 64 or w % 64 or t % 2):
        raise ArchError(f"input {input_shape}: lat/lon must be divisible by 64 and time by 2 "
                        "(pass ceil_mode=True for other grids)")
    encoder = tuple(
        LayerSpec("conv", _scaled(f, width), k, s, batch_norm=i > 0, activation="leaky_relu")
        for i, (f, k, s) in enumerate(GENERATOR_ENCODER_TABLE))
    mirrored = [spec.strides for spec in reversed(encoder)]
    decoder = tuple(
        LayerSpec("deconv", _scaled(f, width), k, s, batch_norm=True, dropout=dropout_rate, activation="relu")
        for (f, k, _), s in zip(GENERATOR_DECODER_TABLE, mirrored))
    output_layer = LayerSpec("conv", 1, tuple(output_kernel), (1, 1, 1), batch_norm=False, activation="tanh")
    n = len(encoder)
    skip_pairs = tuple((n - 1 - j, j) for j in range(1, len(decoder)))
    disc = tuple(
        LayerSpec("conv", 1 if i == len(DISCRIMINATOR_TABLE) - 1 else _scaled(f, width), k, s,
                  batch_norm=0 < i < len(DISCRIMINATOR_TABLE) - 1,
                  activation="linear" if i == len(DISCRIMINATOR_TABLE) - 1 else "leaky_relu")
        for i, (f, k, s) in enumerate(DISCRIMINATOR_TABLE))
    cfg = ArchConfig(encoder, decoder, output_layer, skip_pairs, disc, tuple(input_shape),
                     noise_sigma=noise_sigma, skip_mode=skip_mode, inference_bn=inference_bn)
    validate(cfg)
    return cfg


def table_arch(input_shape, width: float = 1.0) -> ArchConfig:
    """Decoder exactly as printed (eight deconvolution rows), for experimentation.

    It does not reproduce the input shape, so it is returned unvalidated.
    """
    base = default_arch(input_shape, width=width, ceil_mode=True)
    decoder = tuple(
        LayerSpec("deconv", _scaled(f, width), k, s, batch_norm=True, dropout=0.5, activation="relu")
        for f, k, s in GENERATOR_DECODER_TABLE)
    return replace(base, decoder=decoder, skip_pairs=tuple((6 - j, j) for j in range(1, 7)))


# -- shape propagation ------------------------------------------------------------

def generator_shapes(cfg: ArchConfig) -> dict:
    """Propagate shapes through the generator, applying the skip rule.

    Returns the per-layer output shapes ``(D, H, W, C)``; raises
    :class:`ArchError` if a skip cannot be joined.
    """
    t, h, w, c = cfg.input_shape
    skip_into = {}
    for e, d in cfg.skip_pairs:
        if not (0 <= e < len(cfg.encoder)) or not (0 <= d <= len(cfg.decoder)):
            raise ArchError(f"skip pair {(e, d)} out of range")
        skip_into.setdefault(d, []).append(e)
    spatial, ch = (t, h, w), c
    enc = []
    for spec in cfg.encoder:
        spatial, ch = spec.out_spatial(spatial), spec.filters
        enc.append((*spatial, ch))
    dec = []
    layers = list(cfg.decoder) + [cfg.output_layer]
    for j, spec in enumerate(layers):
        for e in skip_into.get(j, ()):
            es = enc[e][:3]
            if any(a < b for a, b in zip(spatial, es)):
                raise ArchError(f"decoder input {spatial} smaller than encoder skip {es} at layer {j}")
            if cfg.skip_mode == "crop":
                spatial = es
            ch = ch + enc[e][3]
        spatial, ch = spec.out_spatial(spatial), spec.filters
        dec.append((*spatial, ch))
    return {"encoder": enc, "decoder": dec[:-1], "output": dec[-1]}


def validate(cfg: ArchConfig) -> None:
    if cfg.skip_mode not in ("crop", "pad"):
        raise ArchError(f"unknown skip mode {cfg.skip_mode!r}")
    if cfg.inference_bn not in ("batch", "infer"):
        raise ArchError(f"unknown inference batch-norm mode {cfg.inference_bn!r}")
    if cfg.output_layer.filters != 1:
        raise ArchError("the output layer must have one filter")
    shapes = generator_shapes(cfg)
    out = shapes["output"]
    t, h, w, c = cfg.input_shape
    if cfg.skip_mode == "crop":
        ok = out == (t, h, w, c)
    else:
        ok = out[3] == c and all(a >= b for a, b in zip(out[:3], (t, h, w)))
    if not ok:
        raise ArchError(f"generator maps {cfg.input_shape} to {out}; it must round-trip")
    discriminator_output_shape(cfg)


def discriminator_output_shape(cfg: ArchConfig) -> tuple[int, int, int, int]:
    if len(cfg.disc_layers) < 2:
        raise ArchError("the discriminator needs an input row and at least one more")
    spatial = cfg.input_shape[:3]
    for spec in cfg.disc_layers:
        if spec.kind != "conv":
            raise ArchError("discriminator layers must be convolutions")
        spatial = spec.out_spatial(spatial)
    return (*spatial, cfg.disc_layers[-1].filters)


# -- parameters ------------------------------------------------------------------

class ModelParams(dict):
    """Ordered mapping of stable layer paths to tensors.

    Trainable entries have ``requires_grad``; batch-norm running statistics
    (``*.bn.mean`` / ``*.bn.var``) do not.
    """

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if v.requires_grad}

    def copy(self) -> ModelParams:
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def count(self, trainable_only: bool = True) -> int:
        return sum(v.size for v in self.values() if v.requires_grad or not trainable_only)

    def bn_stats(self, prefix: str) -> BatchNormStats:
        return BatchNormStats(self[prefix + ".bn.mean"].data, self[prefix + ".bn.var"].data)

    def equal(self, other: ModelParams) -> bool:
        return self.keys() == other.keys() and all(
            self[k].data.dtype == other[k].data.dtype and np.array_equal(self[k].data, other[k].data) for k in self)


def _layer_params(params: ModelParams, name: str, spec: LayerSpec, cin: int, rng: RngStream, dtype,
                  zero: bool = False):
    k = spec.kernel
    shape = (*k, cin, spec.filters) if spec.kind == "conv" else (*k, spec.filters, cin)
    w = np.zeros(shape, dtype=dtype) if zero else rng.split(name).normal(shape, scale=0.02, dtype=dtype)
    params[name + ".kernel"] = Tensor(w, requires_grad=True)
    if spec.batch_norm:
        params[name + ".bn.gamma"] = Tensor(np.ones(spec.filters, dtype=dtype), requires_grad=True)
        params[name + ".bn.beta"] = Tensor(np.zeros(spec.filters, dtype=dtype), requires_grad=True)
        params[name + ".bn.mean"] = Tensor(np.zeros(spec.filters, dtype=dtype))
        params[name + ".bn.var"] = Tensor(np.ones(spec.filters, dtype=dtype))
    else:
        params[name + ".bias"] = Tensor(np.zeros(spec.filters, dtype=dtype), requires_grad=True)


def init_generator(cfg: ArchConfig, rng: RngStream, dtype=np.float32) -> ModelParams:
    """Kernels ~ Normal(0, 0.02); biases 0; batch-norm gamma 1, beta 0.

    Layers followed by batch norm carry no bias (it would be cancelled).
    """
    validate(cfg)
    shapes = generator_shapes(cfg)
    params = ModelParams()
    rng = rng.split("generator")
    cin = cfg.input_shape[3]
    for i, spec in enumerate(cfg.encoder):
        _layer_params(params, f"enc{i}", spec, cin, rng, dtype)
        cin = spec.filters
    skip_into = {}
    for e, d in cfg.skip_pairs:
        skip_into.setdefault(d, []).append(e)
    for j, spec in enumerate(list(cfg.decoder) + [cfg.output_layer]):
        cin_j = cin + sum(shapes["encoder"][e][3] for e in skip_into.get(j, ()))
        name = f"dec{j}" if j < len(cfg.decoder) else "out"
        _layer_params(params, name, spec, cin_j, rng, dtype)
        cin = spec.filters
    return params


def init_discriminator(cfg: ArchConfig, rng: RngStream, dtype=np.float32,
                       zero_final: bool = False) -> ModelParams:
    params = ModelParams()
    rng = rng.split("discriminator")
    first, rest = cfg.disc_layers[0], cfg.disc_layers[1:]
    c = cfg.input_shape[3]
    _layer_params(params, "disc_x", first, c, rng, dtype)
    _layer_params(params, "disc_y", first, c, rng, dtype)
    cin = 2 * first.filters
    for i, spec in enumerate(rest, start=1):
        last = i == len(cfg.disc_layers) - 1
        _layer_params(params, f"disc{i}", spec, cin, rng, dtype, zero=zero_final and last)
        cin = spec.filters
    return params


def init_params(cfg: ArchConfig, rng: RngStream, dtype=np.float32,
                zero_final_disc: bool = False) -> tuple[ModelParams, ModelParams]:
    """``(generator, discriminator)`` parameters."""
    return init_generator(cfg, rng, dtype), init_discriminator(cfg, rng, dtype, zero_final_disc)


# -- forward passes ----------------------------------------------------------------

def _apply_layer(params: ModelParams, name: str, spec: LayerSpec, h: Tensor, bn_mode: str,
                 rng: RngStream | None, dropout_active: bool) -> Tensor:
    op = conv3d if spec.kind == "conv" else conv3d_transpose
    bias = params.get(name + ".bias")
    h = op(h, params[name + ".kernel"], spec.strides, bias)
    if spec.batch_norm:
        h = batch_norm(h, params[name + ".bn.gamma"], params[name + ".bn.beta"], bn_mode,
                       params.bn_stats(name))
    if spec.dropout:
        h = dropout(h, spec.dropout, rng.split(name) if rng is not None else None, active=dropout_active)
    return activation(h, spec.activation)


def _as_batch(x, shape, dtype) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=dtype))
    if x.ndim == 4:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != tuple(shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match architecture input {tuple(shape)}")
    return x


def generator_forward(params: ModelParams, cfg: ArchConfig, x, dropout_active: bool = False,
                      rng: RngStream | None = None, bn_mode: str = "infer") -> Tensor:
    """Map normalized control cubes ``(N, T, H, W, 1)`` to normalized spread in (-1, 1).

    ``bn_mode="train"`` uses batch statistics and updates the running ones,
    ``"batch"`` uses batch statistics only and ``"infer"`` the running ones.
    Dropout (decoder layers) needs ``rng`` whenever ``dropout_active``.
    """
    if dropout_active and rng is None:
        raise ValueError("active dropout needs an rng stream")
    dtype = params["enc0.kernel"].dtype
    h = _as_batch(x, cfg.input_shape, dtype)
    enc = []
    for i, spec in enumerate(cfg.encoder):
        h = _apply_layer(params, f"enc{i}", spec, h, bn_mode, None, False)
        enc.append(h)
    skip_into = {}
    for e, d in cfg.skip_pairs:
        skip_into.setdefault(d, []).append(e)
    layers = list(cfg.decoder) + [cfg.output_layer]
    for j, spec in enumerate(layers):
        for e in skip_into.get(j, ()):
            s = enc[e]
            if cfg.skip_mode == "crop":
                h = crop_to(h, s.shape[1:4])
            else:
                s = pad_to(s, h.shape[1:4])
            h = concat([h, s], axis=-1)
        name = f"dec{j}" if j < len(cfg.decoder) else "out"
        h = _apply_layer(params, name, spec, h, bn_mode, rng, dropout_active)
    if h.shape[1:4] != tuple(cfg.input_shape[:3]):
        h = crop_to(h, cfg.input_shape[:3])
    return h


def discriminator_forward(params: ModelParams, cfg: ArchConfig, x_input, y_candidate,
                          rng: RngStream | None = None, noise_active: bool = False,
                          bn_mode: str = "train") -> Tensor:
    """Patch logits ``(N, d, h, w, 1)`` for an (input, candidate spread) pair.

    Each stream gets its own noise draw and first convolution before the two
    are joined along channels.
    """
    if noise_active and rng is None:
        raise ValueError("active noise needs an rng stream")
    dtype = params["disc_x.kernel"].dtype
    x = _as_batch(x_input, cfg.input_shape, dtype)
    y = _as_batch(y_candidate, cfg.input_shape, dtype)
    if x.shape[0] != y.shape[0]:
        raise ValueError("input and candidate batches differ in size")
    first = cfg.disc_layers[0]
    streams = []
    for name, t in (("disc_x", x), ("disc_y", y)):
        t = add_noise(t, cfg.noise_sigma, rng.split(name, "noise") if noise_active else None, noise_active)
        streams.append(_apply_layer(params, name, first, t, bn_mode, None, False))
    h = concat(streams, axis=-1)
    for i, spec in enumerate(cfg.disc_layers[1:], start=1):
        h = _apply_layer(params, f"disc{i}", spec, h, bn_mode, None, False)
    return h


# -- weight files ------------------------------------------------------------------

def save_params(params: ModelParams, path: str | Path) -> None:
    """Write ``SPW1`` weight file: names, shapes, dtypes, raw payloads, CRC32 trailer."""
    buf = bytearray(WEIGHT_MAGIC)
    buf += struct.pack("<II", WEIGHT_VERSION, len(params))
    for name, t in params.items():
        data = t.data
        code = _CODES.get(data.dtype)
        if code is None:
            raise WeightFileError(f"unsupported dtype {data.dtype} for {name}")
        raw_name = name.encode("utf-8")
        buf += struct.pack("<I", len(raw_name)) + raw_name
        buf += struct.pack("<I", data.ndim)
        buf += struct.pack(f"<{data.ndim}Q", *data.shape)
        buf += struct.pack("<II", code, int(t.requires_grad))
        buf += np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFileError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    pos = 12
    params = ModelParams()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            code, trainable = struct.unpack_from("<II", body, pos)
            pos += 8
            dtype = _DTYPES[code]
            nbytes = math.prod(shape) * dtype.itemsize
            if pos + nbytes > len(body):
                raise WeightFileError(f"{path}: truncated payload for {name}")
            data = np.frombuffer(body, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape)
            pos += nbytes
            params[name] = Tensor(data.astype(dtype.newbyteorder("="), copy=True), requires_grad=bool(trainable))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"{path}: malformed entry ({exc})") from None
    if pos != len(body):
        raise WeightFileError(f"{path}: trailing bytes after {count} entries")
    return params


def check_compatible(loaded: ModelParams, template: ModelParams) -> ModelParams:
    """Return ``loaded`` if it has exactly the template's names and shapes."""
    if loaded.keys() != template.keys():
        missing = sorted(set(template) - set(loaded))
        extra = sorted(set(loaded) - set(template))
        raise WeightFileError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for k in template:
        if loaded[k].shape != template[k].shape:
            raise WeightFileError(f"{k}: shape {loaded[k].shape} does not match architecture {template[k].shape}")
    return loaded


def load_for_arch(path: str | Path, cfg: ArchConfig, which: str = "generator") -> ModelParams:
    """Load weights and verify them against ``cfg`` before handing them out."""
    loaded = load_params(path)
    init = init_generator if which == "generator" else init_discriminator
    template = init(cfg, RngStream(0), loaded[next(iter(loaded))].dtype)
    return check_compatible(loaded, template)
