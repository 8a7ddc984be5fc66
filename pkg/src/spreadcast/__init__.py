"""Predict the spread of an ensemble weather forecast from its control run.

A 3D pix2pix-style conditional GAN maps a control forecast cube (16 lead
times x lat x lon of 500 hPa geopotential height) to the gridpoint spread
that a full ensemble would have produced. Everything runs on numpy,
including the reverse-mode autodiff in :mod:`spreadcast.numerics`.
"""
from .data import EnsembleRun, ForecastCube, Normalizer, SpreadCube, SynthConfig, compute_spread, synth_ensemble
from .model import ArchConfig, default_arch, init_params
from .postprocess import EnsembleOfModels, TrainedModel, mc_dropout_mean, multi_model_mean
from .training import TrainConfig, train
from .verify import EvalReport, MetricConfig, evaluate, rmse, spread_integral, ssim

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "EnsembleOfModels",
    "EnsembleRun",
    "EvalReport",
    "ForecastCube",
    "MetricConfig",
    "Normalizer",
    "SpreadCube",
    "SynthConfig",
    "TrainConfig",
    "TrainedModel",
    "compute_spread",
    "default_arch",
    "evaluate",
    "init_params",
    "mc_dropout_mean",
    "multi_model_mean",
    "rmse",
    "spread_integral",
    "ssim",
    "synth_ensemble",
    "train",
]
