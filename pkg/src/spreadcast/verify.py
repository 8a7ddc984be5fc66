"""Baselines and forecast error norms for spread predictions.

Metrics are computed per 2D lead-time slice; a cube's score is the vector of
16 slice scores. ``evaluate`` averages these over the test runs.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import LEAD_HOURS, SpreadCube, month_day


class BaselineError(LookupError):
    """The archive does not hold the data a baseline needs."""


@dataclass(frozen=True)
class MetricConfig:
    """SSIM constants ``C1 = (k1 L)^2`` and ``C2 = (k2 L)^2`` for data range ``L``.

    ``ssim_denominator="variance"`` is the usual ``sigma_x^2 + sigma_y^2 + C2``;
    ``"stddev"`` uses ``sigma_x + sigma_y + C2`` instead (with that form
    ``ssim(x, x)`` is no longer exactly 1).
    """

    data_range: float = 1.0
    ssim_denominator: str = "variance"
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")
        if self.ssim_denominator not in ("variance", "stddev"):
            raise ValueError(f"unknown SSIM denominator {self.ssim_denominator!r}")

    @property
    def C1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def C2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @classmethod
    def from_spreads(cls, spreads, **kw) -> MetricConfig:
        lo = min(float(np.min(_values(s))) for s in spreads)
        hi = max(float(np.max(_values(s))) for s in spreads)
        return cls(data_range=hi - lo, **kw)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, SpreadCube) or hasattr(x, "values") else np.asarray(x)


def _pair(x, y):
    x = np.asarray(_values(x), dtype=np.float64)
    y = np.asarray(_values(y), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


# -- error norms -------------------------------------------------------------------

def lat_weights(lats_deg: np.ndarray) -> np.ndarray:
    w = np.cos(np.radians(np.asarray(lats_deg, dtype=np.float64)))
    return w / w.sum()


def rmse(x, y, lats: np.ndarray | None = None) -> float:
    """Root mean squared difference; unweighted unless ``lats`` (degrees) are given."""
    x, y = _pair(x, y)
    d2 = (x - y) ** 2
    if lats is None:
        return float(np.sqrt(d2.mean()))
    w = lat_weights(lats)
    return float(np.sqrt((d2.mean(axis=-1) * w).sum()))


def ssim(x, y, cfg: MetricConfig) -> float:
    """Single-window SSIM over a whole 2D field (statistics use N-1)."""
    x, y = _pair(x, y)
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx = (dx * dx).sum() / (n - 1)
    vy = (dy * dy).sum() / (n - 1)
    cov = (dx * dy).sum() / (n - 1)
    c1, c2 = cfg.C1, cfg.C2
    if cfg.ssim_denominator == "variance":
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
    else:
        den = (mx * mx + my * my + c1) * (np.sqrt(vx) + np.sqrt(vy) + c2)
    return float((2 * mx * my + c1) * (2 * cov + c2) / den)


def spread_integral(field2d, lats: np.ndarray) -> float:
    """Area mean over the sphere: midpoint rule with cos(latitude) weights."""
    f = np.asarray(_values(field2d), dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != len(lats):
        raise ValueError(f"field {f.shape} does not match {len(lats)} latitudes")
    if f.shape[1] < 1 or len(lats) < 1:
        raise ValueError("degenerate grid")
    w = np.cos(np.radians(np.asarray(lats, dtype=np.float64)))
    if w.sum() <= 1e-12 * len(w):
        raise ValueError("degenerate grid: latitude weights sum to zero")
    return float((f.mean(axis=1) * w).sum() / w.sum())


def cube_scores(pred, truth, cfg: MetricConfig, lats: np.ndarray) -> np.ndarray:
    """Per-lead ``[rmse, ssim, spread_integral(pred)]`` rows, shape (T, 3)."""
    p, t = _pair(pred, truth)
    out = np.empty((p.shape[0], 3))
    for k in range(p.shape[0]):
        out[k] = (rmse(p[k], t[k]), ssim(p[k], t[k], cfg), spread_integral(p[k], lats))
    return out


def cube_rmse(pred, truth) -> np.ndarray:
    p, t = _pair(pred, truth)
    return np.sqrt(((p - t) ** 2).mean(axis=(1, 2)))


# -- baselines --------------------------------------------------------------------

def climatology_spread(train_spreads: Mapping[dt.date, SpreadCube], target: dt.date) -> SpreadCube:
    """Mean training spread over all runs sharing ``target``'s calendar day."""
    key = month_day(target)
    picked = [train_spreads[d] for d in sorted(train_spreads) if month_day(d) == key]
    if not picked:
        raise BaselineError(f"no training run on {key[0]:02d}-{key[1]:02d}")
    acc = np.zeros(picked[0].values.shape, dtype=np.float64)
    for cube in picked:
        acc += cube.values
    acc /= len(picked)
    return SpreadCube(target, acc.astype(picked[0].values.dtype), picked[0].grid)


def persistence_spread(archive: Mapping[dt.date, SpreadCube], target: dt.date) -> SpreadCube:
    """Yesterday's true spread, reissued for ``target`` with identical values."""
    prev = target - dt.timedelta(days=1)
    if prev not in archive:
        raise BaselineError(f"persistence for {target} needs the true spread of {prev}")
    cube = archive[prev]
    return SpreadCube(target, cube.values, cube.grid)


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    methods: list[str]
    dates: list[dt.date]
    scores: dict[str, np.ndarray]  # method -> (n_dates, T, 3)
    truth_integral: np.ndarray  # (n_dates, T)
    lead_hours: np.ndarray = field(default_factory=lambda: LEAD_HOURS.copy())

    def rows(self):
        for m in self.methods:
            for i, d in enumerate(self.dates):
                for k, h in enumerate(self.lead_hours):
                    r, s, si = self.scores[m][i, k]
                    yield m, d, int(h), float(r), float(s), float(si)

    def summary(self) -> dict[str, dict[str, float]]:
        """Method -> mean RMSE / mean SSIM over all runs and lead times, best RMSE first."""
        out = {m: {"rmse": float(self.scores[m][..., 0].mean()),
                   "ssim": float(self.scores[m][..., 1].mean())} for m in self.methods}
        return dict(sorted(out.items(), key=lambda kv: kv[1]["rmse"]))

    def curves(self) -> dict[str, np.ndarray]:
        """Method -> (T, 3) per-lead means over runs; ``truth`` carries its spread integral."""
        out = {m: self.scores[m].mean(axis=0) for m in self.methods}
        truth = np.zeros((len(self.lead_hours), 3))
        truth[:, 1] = 1.0
        truth[:, 2] = self.truth_integral.mean(axis=0)
        out["truth"] = truth
        return out

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "init_date", "lead_hours", "rmse", "ssim", "spread_integral"])
            for m, d, h, r, s, si in self.rows():
                w.writerow([m, d.isoformat(), h, repr(r), repr(s), repr(si)])
        with open(out / "curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "lead_hours", "rmse", "ssim", "spread_integral"])
            for m, arr in self.curves().items():
                for k, h in enumerate(self.lead_hours):
                    w.writerow([m, int(h), *(repr(float(v)) for v in arr[k])])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        return out


def evaluate(predictions: Mapping[str, Mapping[dt.date, SpreadCube]], truth: Mapping[dt.date, SpreadCube],
             cfg: MetricConfig) -> EvalReport:
    """Score every method on every truth date."""
    if not truth:
        raise ValueError("no truth runs to evaluate against")
    dates = sorted(truth)
    first = truth[dates[0]]
    lats = first.lats
    scores = {}
    for name, preds in predictions.items():
        arr = np.empty((len(dates), first.shape[0], 3))
        for i, d in enumerate(dates):
            if d not in preds:
                raise ValueError(f"method {name!r} has no prediction for {d}")
            if preds[d].values.shape != truth[d].values.shape:
                raise ValueError(f"method {name!r} on {d}: shape {preds[d].values.shape} "
                                 f"!= truth {truth[d].values.shape}")
            arr[i] = cube_scores(preds[d], truth[d], cfg, lats)
        scores[name] = arr
    truth_int = np.array([[spread_integral(truth[d].values[k], lats) for k in range(first.shape[0])]
                          for d in dates])
    return EvalReport(list(predictions), dates, scores, truth_int)
