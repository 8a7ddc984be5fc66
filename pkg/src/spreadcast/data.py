"""Forecast cubes, ensemble spread, dataset splits, normalization and cube files.

A forecast cube holds one 00 UTC run: 16 lead times (6 h .. 96 h) on a
regular latitude/longitude grid. Because operational ensemble archives are
not redistributable, :func:`synth_ensemble` produces a stand-in dataset
whose spread is a smooth, learnable function of the control field and the
lead time.
"""
from __future__ import annotations

import datetime as dt
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics.rng import RngStream

N_STEPS = 16
STEP_HOURS = 6
LEAD_HOURS = np.arange(STEP_HOURS, STEP_HOURS * (N_STEPS + 1), STEP_HOURS)

CUBE_MAGIC = b"ESC1"
CUBE_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CubeFormatError(ValueError):
    """Malformed, truncated or corrupted cube file."""


@dataclass(frozen=True)
class Grid:
    """Regular grid: cell-center coordinates ``lat0 + i*dlat``, ``lon0 + j*dlon`` (degrees)."""

    lat0: float
    dlat: float
    lon0: float
    dlon: float

    @classmethod
    def regular(cls, nlat: int, nlon: int) -> Grid:
        dlat = -180.0 / nlat
        dlon = 360.0 / nlon
        return cls(90.0 + dlat / 2, dlat, dlon / 2, dlon)

    def lats(self, nlat: int) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(nlat)

    def lons(self, nlon: int) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(nlon)


@dataclass(frozen=True, eq=False)
class ForecastCube:
    init_date: dt.date
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] != N_STEPS:
            raise ValueError(f"forecast cube must be ({N_STEPS}, lat, lon), got {v.shape}")
        if self.grid.dlat == 0 or self.grid.dlon == 0:
            raise ValueError("grid spacing must be non-zero")
        if not np.isfinite(v).all():
            raise ValueError("forecast cube has non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def lats(self) -> np.ndarray:
        return self.grid.lats(self.shape[1])

    @property
    def lons(self) -> np.ndarray:
        return self.grid.lons(self.shape[2])


class SpreadCube(ForecastCube):
    def __post_init__(self):
        super().__post_init__()
        if (self.values < 0).any():
            raise ValueError("spread values must be non-negative")


@dataclass(frozen=True, eq=False)
class EnsembleRun:
    control: ForecastCube
    members: tuple[ForecastCube, ...]
    spread: SpreadCube

    @classmethod
    def from_members(cls, control: ForecastCube, members: Sequence[ForecastCube], ddof: int = 1) -> EnsembleRun:
        for m in members:
            if m.init_date != control.init_date or m.grid != control.grid or m.shape != control.shape:
                raise ValueError("ensemble members must share date, grid and shape with the control")
        return cls(control, tuple(members), compute_spread(members, ddof=ddof))

    @property
    def init_date(self) -> dt.date:
        return self.control.init_date


def compute_spread(members: Sequence[ForecastCube] | EnsembleRun, ddof: int = 1) -> SpreadCube:
    """Gridpoint standard deviation about the ensemble mean.

    ``ddof=1`` gives the sample estimator (divisor M-1), ``ddof=0`` divides by M.
    """
    if isinstance(members, EnsembleRun):
        members = members.members
    members = list(members)
    if len(members) < 2:
        raise ValueError(f"spread needs at least 2 members, got {len(members)}")
    stack = np.stack([m.values for m in members]).astype(np.float64)
    mean = stack.mean(axis=0)
    var = ((stack - mean) ** 2).sum(axis=0) / (len(members) - ddof)
    dtype = members[0].values.dtype
    return SpreadCube(members[0].init_date, np.sqrt(var).astype(dtype), members[0].grid)


# -- splits -------------------------------------------------------------------

def chronological_split(index: Sequence, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Contiguous train/val/test blocks of sizes floor(0.8n), floor(0.1n) and the rest."""
    items = list(index)
    n = len(items)
    if n == 0:
        raise ValueError("cannot split an empty index")
    if any(b < a for a, b in zip(items, items[1:])):
        raise ValueError("index must be sorted ascending")
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


# -- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Min/max maps of control height and spread onto [-1, 1], fitted on training data."""

    control_min: float
    control_max: float
    spread_min: float
    spread_max: float

    def __post_init__(self):
        if not self.control_max > self.control_min or not self.spread_max > self.spread_min:
            raise ValueError("degenerate normalization range")

    @staticmethod
    def _fwd(x, lo, hi):
        return (2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0)

    @staticmethod
    def _inv(y, lo, hi):
        return (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo

    def apply_control(self, x, dtype=np.float32) -> np.ndarray:
        return self._fwd(x, self.control_min, self.control_max).astype(dtype)

    def invert_control(self, y) -> np.ndarray:
        return self._inv(y, self.control_min, self.control_max)

    def apply_spread(self, x, dtype=np.float32) -> np.ndarray:
        return self._fwd(x, self.spread_min, self.spread_max).astype(dtype)

    def invert_spread(self, y) -> np.ndarray:
        return np.maximum(self._inv(y, self.spread_min, self.spread_max), 0.0)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


def fit_normalizer(controls: Iterable[np.ndarray | ForecastCube], spreads: Iterable[np.ndarray | ForecastCube]) -> Normalizer:
    """Fit on the training split only; min/max over every value seen."""
    def bounds(items):
        lo, hi = math.inf, -math.inf
        for it in items:
            v = it.values if isinstance(it, ForecastCube) else np.asarray(it)
            lo = min(lo, float(v.min()))
            hi = max(hi, float(v.max()))
        if lo == math.inf:
            raise ValueError("no training data to fit the normalizer")
        return lo, hi

    c_lo, c_hi = bounds(controls)
    s_lo, s_hi = bounds(spreads)
    return Normalizer(c_lo, c_hi, s_lo, s_hi)


# -- calendar helpers -----------------------------------------------------------

def month_day(date: dt.date) -> tuple[int, int]:
    """Calendar key used for climatology; Feb 29 folds onto Feb 28."""
    if date.month == 2 and date.day == 29:
        return (2, 28)
    return (date.month, date.day)


def day_of_year(date: dt.date) -> int:
    """Zero-based day index in a 365-day calendar."""
    m, d = month_day(date)
    return (dt.date(2001, m, d) - dt.date(2001, 1, 1)).days


def sample_dates(start_year: int, years: int, day_stride: int = 1) -> list[dt.date]:
    """00 UTC run dates across whole years; with ``day_stride > 1`` only days with
    ``day_of_year % day_stride == 0`` are kept (Feb 29 is then skipped)."""
    if years < 1 or day_stride < 1:
        raise ValueError("years and day_stride must be positive")
    out = []
    d = dt.date(start_year, 1, 1)
    end = dt.date(start_year + years, 1, 1)
    while d < end:
        leap_day = d.month == 2 and d.day == 29
        if day_stride == 1 or (not leap_day and day_of_year(d) % day_stride == 0):
            out.append(d)
        d += dt.timedelta(days=1)
    return out


# -- synthetic ensembles --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic 500 hPa-like flow and its ensemble.

    The control is a zonal wave plus advected Gaussian bumps. Members shift the
    wave phase by ``sigma0 * (t/96h)**growth_p * xi_i`` and scale each bump by
    ``1 + bump_sigma0 * (t/96h)**growth_p * zeta_ij``.
    """

    grid_h: int = 64
    grid_w: int = 128
    base_height: float = 5500.0
    amplitude: float = 200.0
    wavenumber: int = 4
    rotation_rate: float = 2 * math.pi / 240.0
    seasonal_amp: float = 0.3
    phase_noise: float = 1.0
    n_bumps: int = 3
    bump_amp: tuple[float, float] = (80.0, 160.0)
    bump_width_deg: tuple[float, float] = (8.0, 18.0)
    bump_speed: float = 2 * math.pi / 192.0
    members: int = 20
    sigma0: float = 0.5
    bump_sigma0: float = 0.4
    growth_p: float = 1.5
    seed: int = 0
    bumps: tuple = field(default=())

    def __post_init__(self):
        if self.members < 2:
            raise ValueError("need at least 2 members")
        if self.sigma0 < 0 or self.bump_sigma0 < 0:
            raise ValueError("perturbation scales must be non-negative")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid extents must be positive")

    @property
    def grid(self) -> Grid:
        return Grid.regular(self.grid_h, self.grid_w)


def _date_bumps(cfg: SynthConfig, rng: np.random.Generator):
    """(lon0, lat0, width, amp, speed) per bump, in radians / metres / rad per hour."""
    if cfg.bumps:
        return [tuple(b) for b in cfg.bumps]
    out = []
    for _ in range(cfg.n_bumps):
        lon = rng.uniform(0, 2 * math.pi)
        lat = math.radians(rng.uniform(-65, 65))
        width = math.radians(rng.uniform(*cfg.bump_width_deg))
        amp = rng.uniform(*cfg.bump_amp) * rng.choice([-1.0, 1.0])
        speed = cfg.bump_speed * rng.uniform(0.5, 1.5)
        out.append((lon, lat, width, amp, speed))
    return out


def synth_ensemble(cfg: SynthConfig, init_date: dt.date) -> EnsembleRun:
    """Deterministic synthetic ensemble for one initialization date."""
    rng = RngStream(cfg.seed).split("synth", init_date.toordinal()).generator()
    grid = cfg.grid
    lat = np.radians(grid.lats(cfg.grid_h))[None, :, None]
    lon = np.radians(grid.lons(cfg.grid_w))[None, None, :]
    t = LEAD_HOURS.astype(np.float64)[:, None, None]

    season = 1.0 + cfg.seasonal_amp * math.cos(2 * math.pi * (day_of_year(init_date) - 15) / 365.0)
    amp = cfg.amplitude * season
    theta = 2 * math.pi * 3 * day_of_year(init_date) / 365.0 + rng.normal(0.0, cfg.phase_noise)
    growth = (t / 96.0) ** cfg.growth_p  # (T,1,1)

    bumps = _date_bumps(cfg, rng)
    shapes = []
    for lon0, lat0, width, _, speed in bumps:
        cos_d = (np.sin(lat) * math.sin(lat0)
                 + np.cos(lat) * math.cos(lat0) * np.cos(lon - (lon0 + speed * t)))
        d = np.arccos(np.clip(cos_d, -1.0, 1.0))
        shapes.append(np.exp(-d * d / (2 * width * width)))

    xi = rng.standard_normal(cfg.members)
    zeta = rng.standard_normal((cfg.members, len(bumps)))

    def field_for(phase_shift, bump_scale):
        phase = cfg.wavenumber * lon - cfg.rotation_rate * t + theta + phase_shift
        z = cfg.base_height + amp * np.cos(lat) * np.sin(phase)
        for j, (_, _, _, b_amp, _) in enumerate(bumps):
            z = z + b_amp * bump_scale[j] * shapes[j]
        return z

    ones = [np.ones_like(growth)] * len(bumps)
    control_values = field_for(0.0, ones)
    sig_phase = cfg.sigma0 * season * growth
    members = []
    for i in range(cfg.members):
        scales = [1.0 + cfg.bump_sigma0 * growth * zeta[i, j] for j in range(len(bumps))]
        members.append(field_for(sig_phase * xi[i], scales))

    control = ForecastCube(init_date, control_values.astype(np.float32), grid)
    member_cubes = [ForecastCube(init_date, m.astype(np.float32), grid) for m in members]
    return EnsembleRun.from_members(control, member_cubes)


# -- cube files ---------------------------------------------------------------

def write_cube(cube: ForecastCube, path: str | Path, dtype_code: int = 0) -> None:
    """Write one cube (little-endian, CRC32 trailer)."""
    values = np.ascontiguousarray(cube.values, dtype=DTYPE_CODES[dtype_code])
    date = cube.init_date.isoformat().encode("utf-8")
    g = cube.grid
    buf = bytearray()
    buf += CUBE_MAGIC
    buf += struct.pack("<I", CUBE_VERSION)
    buf += struct.pack("<I", len(date)) + date
    buf += struct.pack("<I", 3)
    buf += struct.pack("<3Q", *values.shape)
    buf += struct.pack("<4d", g.lat0, g.dlat, g.lon0, g.dlon)
    buf += struct.pack("<I", dtype_code)
    buf += values.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


def read_cube(path: str | Path, kind: type[ForecastCube] = ForecastCube) -> ForecastCube:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic")
    if len(raw) < 12:
        raise CubeFormatError(f"{path}: truncated header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    pos = 4
    try:
        (version,) = struct.unpack_from("<I", raw, pos)
        if version != CUBE_VERSION:
            raise CubeFormatError(f"{path}: unsupported version {version}")
        pos += 4
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        date = dt.date.fromisoformat(raw[pos:pos + n].decode("utf-8"))
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if rank != 3:
            raise CubeFormatError(f"{path}: expected rank 3, got {rank}")
        shape = struct.unpack_from("<3Q", raw, pos)
        pos += 24
        grid = Grid(*struct.unpack_from("<4d", raw, pos))
        pos += 32
        (code,) = struct.unpack_from("<I", raw, pos)
        pos += 4
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CubeFormatError):
            raise
        raise CubeFormatError(f"{path}: truncated or malformed header ({exc})") from None
    if code not in DTYPE_CODES:
        raise CubeFormatError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    nbytes = math.prod(shape) * dtype.itemsize
    if len(body) - pos != nbytes:
        raise CubeFormatError(
            f"{path}: header declares {shape} ({nbytes} bytes) but payload has {len(body) - pos} bytes")
    if zlib.crc32(body) != crc:
        raise CubeFormatError(f"{path}: checksum mismatch")
    values = np.frombuffer(body, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape)
    return kind(date, values.astype(dtype.newbyteorder("="), copy=True), grid)


def write_run(run: EnsembleRun, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_cube(run.control, d / "control.esc")
    for i, m in enumerate(run.members):
        write_cube(m, d / f"member_{i:03d}.esc")
    write_cube(run.spread, d / "spread.esc")
    return d


def read_run(directory: str | Path) -> EnsembleRun:
    d = Path(directory)
    control = read_cube(d / "control.esc")
    members = tuple(read_cube(p) for p in sorted(d.glob("member_*.esc")))
    spread = read_cube(d / "spread.esc", SpreadCube)
    return EnsembleRun(control, members, spread)
