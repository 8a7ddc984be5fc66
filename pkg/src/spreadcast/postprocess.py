"""Averaging schemes on top of trained generators.

``mc_dropout_mean`` keeps dropout switched on at inference and averages
several stochastic passes of one model; ``multi_model_mean`` averages the
deterministic predictions of independently trained models. Both average in
physical units after each prediction has been clamped at zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ForecastCube, Normalizer, SpreadCube
from .model import ArchConfig, ModelParams
from .numerics import RngStream
from .training import predict_spread


@dataclass(frozen=True)
class TrainedModel:
    """A generator with the architecture and normalization it was trained with."""

    gen: ModelParams
    arch: ArchConfig
    norm: Normalizer

    def predict(self, control, dropout_active: bool = False, rng: RngStream | None = None) -> np.ndarray:
        """Physical spread (float64, >= 0) for a control cube or a ``(T, H, W)`` array."""
        values = control.values if isinstance(control, ForecastCube) else np.asarray(control)
        return predict_spread(self.gen, self.arch, self.norm, values, dropout_active, rng)


class EnsembleOfModels(tuple):
    """Trained models sharing one input shape."""

    def __new__(cls, models: Sequence[TrainedModel]):
        models = tuple(models)
        if not models:
            raise ValueError("an ensemble of models needs at least one model")
        shapes = {m.arch.input_shape for m in models}
        if len(shapes) != 1:
            raise ValueError(f"models disagree on input shape: {sorted(shapes)}")
        return super().__new__(cls, models)


def _wrap(control, values: np.ndarray):
    if isinstance(control, ForecastCube):
        return SpreadCube(control.init_date, values, control.grid)
    return values


def mc_dropout_mean(model: TrainedModel, control, n: int = 10, seed: int = 0):
    """Mean of ``n`` dropout-active passes; pass ``r`` draws from ``RngStream(seed).split(r)``.

    Returns a :class:`SpreadCube` for a cube input, an array otherwise.
    """
    if n < 1:
        raise ValueError(f"need at least one pass, got n={n}")
    root = RngStream(seed)
    acc = None
    for r in range(n):
        p = model.predict(control, dropout_active=True, rng=root.split(r))
        acc = p.copy() if acc is None else acc + p
    return _wrap(control, acc / n)


def multi_model_mean(models: Sequence[TrainedModel], control):
    """Mean of the deterministic predictions of every model, in list order."""
    models = EnsembleOfModels(models)
    acc = None
    for m in models:
        p = m.predict(control)
        acc = p.copy() if acc is None else acc + p
    return _wrap(control, acc / len(models))
