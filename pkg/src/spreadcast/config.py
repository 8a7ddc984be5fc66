"""Run configuration: a JSON document with fixed sections and no unknown keys.

Every section may be omitted; missing keys take the defaults below.
:func:`resolve` returns the complete document, which commands write next
to their outputs as ``resolved_config.json``. Feeding that file back in
reproduces the run.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .data import SynthConfig
from .model import ArchConfig, ArchError, default_arch, validate
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


SYNTH_KEYS = tuple(f.name for f in fields(SynthConfig) if f.name != "bumps")

DEFAULTS = {
    "data": {
        **{k: getattr(SynthConfig(), k) for k in SYNTH_KEYS},
        "start_year": 2010,
        "years": 9,
        "day_stride": 4,
        "fractions": [0.8, 0.1, 0.1],
        "write_members": False,
    },
    "arch": {
        "width": 1.0,
        "ceil_mode": False,
        "noise_sigma": 0.1,
        "dropout_rate": 0.5,
        "skip_mode": "crop",
        "output_kernel": [3, 3, 3],
        "inference_bn": "batch",
    },
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "metrics": {"ssim_denominator": "variance", "ssim_range_mode": "truth", "data_range": None},
    "pipeline": {"seeds": None, "mc_dropout": 10, "mc_seed": 0},
    "paths": {"work_dir": "work"},
}

_LAYER_KEYS = {"encoder", "decoder", "output_layer", "skip_pairs", "disc_layers", "input_shape",
               "noise_sigma", "skip_mode", "inference_bn"}


def jsonable(v):
    if isinstance(v, tuple):
        return [jsonable(x) for x in v]
    if isinstance(v, list):
        return [jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: jsonable(x) for k, x in v.items()}
    return v


def _merge(section: str, given) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    base = copy.deepcopy(DEFAULTS[section])
    unknown = sorted(set(given) - set(base))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    base.update(copy.deepcopy(given))
    return base


def _resolve_arch(arch, data: dict) -> dict:
    """Full layer lists for the architecture section."""
    input_shape = (16, data["grid_h"], data["grid_w"], 1)
    if arch == "default":
        arch = {}
    if not isinstance(arch, dict):
        raise ConfigError('section "arch" must be "default" or an object')
    try:
        if "encoder" in arch:
            unknown = sorted(set(arch) - _LAYER_KEYS)
            if unknown:
                raise ConfigError(f"unknown key(s) in 'arch': {', '.join(unknown)}")
            cfg = ArchConfig.from_dict(arch)
            if tuple(cfg.input_shape) != input_shape:
                raise ConfigError(f"arch input_shape {list(cfg.input_shape)} does not match the data grid "
                                  f"{list(input_shape)}")
            validate(cfg)
        else:
            opts = _merge("arch", arch)
            cfg = default_arch(input_shape, width=float(opts["width"]), ceil_mode=bool(opts["ceil_mode"]),
                               noise_sigma=float(opts["noise_sigma"]), dropout_rate=opts["dropout_rate"],
                               skip_mode=opts["skip_mode"], output_kernel=tuple(opts["output_kernel"]),
                               inference_bn=opts["inference_bn"])
    except (ArchError, TypeError, KeyError) as e:
        raise ConfigError(f"bad architecture: {e}") from e
    return jsonable(cfg.to_dict())


def resolve(doc: dict | None) -> dict:
    """Validate ``doc`` and fill in every default."""
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    out = {}
    for section in ("data", "train", "metrics", "pipeline", "paths"):
        out[section] = _merge(section, doc.get(section, {}))
    out["arch"] = _resolve_arch(doc.get("arch", "default"), out["data"])
    # construct once so value errors surface here
    synth_config(out)
    train_config(out)
    metrics = out["metrics"]
    if metrics["ssim_denominator"] not in ("variance", "stddev"):
        raise ConfigError(f"unknown ssim_denominator {metrics['ssim_denominator']!r}")
    if metrics["ssim_range_mode"] not in ("truth", "fixed"):
        raise ConfigError(f"unknown ssim_range_mode {metrics['ssim_range_mode']!r}")
    if metrics["ssim_range_mode"] == "fixed" and not (metrics["data_range"] or 0) > 0:
        raise ConfigError("ssim_range_mode 'fixed' needs a positive data_range")
    fr = out["data"]["fractions"]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("data.fractions must be three non-negative numbers summing to 1")
    if out["pipeline"]["seeds"] is None:
        out["pipeline"]["seeds"] = [out["train"]["seed"]]
    if not out["pipeline"]["seeds"] or int(out["pipeline"]["mc_dropout"]) < 1:
        raise ConfigError("pipeline needs at least one seed and mc_dropout >= 1")
    return jsonable(out)


def load(path: str | Path | None) -> dict:
    if path is None:
        return resolve({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return resolve(doc)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def write_sidecar(cfg: dict, out_dir: str | Path) -> Path:
    """Write the resolved config into ``out_dir`` as ``resolved_config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(dumps(cfg))
    return path


def synth_config(cfg: dict) -> SynthConfig:
    d = cfg["data"]
    kw = {k: d[k] for k in SYNTH_KEYS}
    kw["bump_amp"] = tuple(kw["bump_amp"])
    kw["bump_width_deg"] = tuple(kw["bump_width_deg"])
    try:
        return SynthConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad data section: {e}") from e


def arch_config(cfg: dict) -> ArchConfig:
    return ArchConfig.from_dict(cfg["arch"])


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if seed is not None:
        t["seed"] = int(seed)
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train section: {e}") from e
