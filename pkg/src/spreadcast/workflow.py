"""File-level pipeline steps behind the command line.

A data directory looks like::

    DATA/index.json              dates, lag dates, grid
    DATA/runs/<YYYY-MM-DD>/      control.esc, spread.esc [, member_XXX.esc]
    DATA/split/{train,val,test}.txt

``lag_dates`` are the days before each test date. They are synthesized only
so that persistence can be scored, and they never enter a split.

A model directory holds ``generator.spw`` (best validation checkpoint),
``discriminator.spw`` (final), ``arch.json``, ``normalizer.json``,
``train_log.csv``, ``epochs.csv``, ``checkpoints/`` and the resolved config.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import shutil
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import config as config_mod
from .data import (
    CubeFormatError,
    ForecastCube,
    Normalizer,
    SpreadCube,
    chronological_split,
    fit_normalizer,
    read_cube,
    sample_dates,
    synth_ensemble,
    write_cube,
    write_run,
)
from .model import ArchConfig, load_for_arch, save_params
from .postprocess import TrainedModel, mc_dropout_mean, multi_model_mean
from .training import Samples, train
from .verify import EvalReport, MetricConfig, climatology_spread, evaluate, persistence_spread

log = logging.getLogger(__name__)

INDEX_FORMAT = "spreadcast-data/1"
SPLITS = ("train", "val", "test")
PREDICTION_DTYPE = 1  # float64 cube payloads


class WorkflowError(RuntimeError):
    """A pipeline step cannot run on the given inputs. ``code`` is machine readable."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- data directories -----------------------------------------------------------

def run_dir(data_dir: str | Path, date: dt.date) -> Path:
    return Path(data_dir) / "runs" / date.isoformat()


def synth_dataset(cfg: dict, out_dir: str | Path) -> Path:
    """Synthesize every sampled day (plus the day before each test date)."""
    d = cfg["data"]
    synth = config_mod.synth_config(cfg)
    dates = sample_dates(d["start_year"], d["years"], d["day_stride"])
    _, _, test = chronological_split(dates, d["fractions"])
    have = set(dates)
    lag_dates = sorted({t - dt.timedelta(days=1) for t in test} - have)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, date in enumerate(sorted(have | set(lag_dates))):
        run = synth_ensemble(synth, date)
        target = run_dir(out, date)
        if d["write_members"]:
            write_run(run, target)
        else:
            target.mkdir(parents=True, exist_ok=True)
            write_cube(run.control, target / "control.esc")
            write_cube(run.spread, target / "spread.esc")
        if (i + 1) % 100 == 0:
            log.info("synthesized %d runs", i + 1)
    index = {"format": INDEX_FORMAT, "dates": [x.isoformat() for x in dates],
             "lag_dates": [x.isoformat() for x in lag_dates], "grid": [synth.grid_h, synth.grid_w]}
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return out


def read_index(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "index.json"
    try:
        index = json.loads(path.read_text())
    except FileNotFoundError:
        raise WorkflowError("DATA_MISSING", f"{data_dir} is not a data directory (no index.json)") from None
    except json.JSONDecodeError as e:
        raise WorkflowError("DATA_CORRUPT", f"{path}: {e}") from None
    if index.get("format") != INDEX_FORMAT:
        raise WorkflowError("DATA_CORRUPT", f"{path}: unknown format {index.get('format')!r}")
    index["dates"] = [dt.date.fromisoformat(x) for x in index["dates"]]
    index["lag_dates"] = [dt.date.fromisoformat(x) for x in index["lag_dates"]]
    return index


def split_dataset(data_dir: str | Path, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[dt.date]]:
    index = read_index(data_dir)
    parts = dict(zip(SPLITS, chronological_split(index["dates"], fractions)))
    out = Path(data_dir) / "split"
    out.mkdir(exist_ok=True)
    for name, dates in parts.items():
        (out / f"{name}.txt").write_text("".join(f"{x.isoformat()}\n" for x in dates))
    return parts


def read_split(data_dir: str | Path, name: str) -> list[dt.date]:
    if name not in SPLITS:
        raise WorkflowError("USAGE", f"unknown split {name!r}")
    path = Path(data_dir) / "split" / f"{name}.txt"
    if not path.exists():
        raise WorkflowError("SPLIT_MISSING", f"{path} not found; run `split` first")
    return [dt.date.fromisoformat(line) for line in path.read_text().split()]


def read_cube_file(path: Path, kind=ForecastCube):
    try:
        return read_cube(path, kind)
    except FileNotFoundError:
        raise WorkflowError("DATA_MISSING", f"{path} not found") from None
    except CubeFormatError as e:
        raise WorkflowError("FORMAT_ERROR", f"{path}: {e}") from None


def read_control(data_dir, date: dt.date) -> ForecastCube:
    return read_cube_file(run_dir(data_dir, date) / "control.esc")


def read_spread(data_dir, date: dt.date) -> SpreadCube:
    return read_cube_file(run_dir(data_dir, date) / "spread.esc", SpreadCube)


def load_samples(data_dir, dates: Iterable[dt.date]) -> Samples:
    dates = list(dates)
    controls = [read_control(data_dir, d).values for d in dates]
    spreads = [read_spread(data_dir, d).values for d in dates]
    return Samples(dates, np.stack(controls), np.stack(spreads))


# -- models -----------------------------------------------------------------------

def train_model(cfg: dict, data_dir, out_dir, seed: int | None = None) -> Path:
    arch = config_mod.arch_config(cfg)
    tcfg = config_mod.train_config(cfg, seed)
    train_set = load_samples(data_dir, read_split(data_dir, "train"))
    val_dates = read_split(data_dir, "val")
    val_set = load_samples(data_dir, val_dates) if val_dates else None
    if train_set.control.shape[1:] != tuple(arch.input_shape[:3]):
        raise WorkflowError("SHAPE_MISMATCH", f"data cubes {train_set.control.shape[1:]} do not match "
                            f"architecture input {tuple(arch.input_shape[:3])}")
    norm = fit_normalizer(train_set.control, train_set.spread)
    out = Path(out_dir)
    if out.exists():
        shutil.rmtree(out / "checkpoints", ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    result = train(train_set, val_set, arch, tcfg, norm, checkpoint_dir=out / "checkpoints")
    save_params(result.best_gen, out / "generator.spw")
    save_params(result.final.disc, out / "discriminator.spw")
    (out / "arch.json").write_text(json.dumps(config_mod.jsonable(arch.to_dict()), indent=2) + "\n")
    (out / "normalizer.json").write_text(json.dumps(norm.to_dict(), indent=2) + "\n")
    result.log.write_csv(out / "train_log.csv")
    with open(out / "epochs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "val_rmse", "best", "wall_ms"])
        for i, (v, ms) in enumerate(zip(result.log.val_rmse, result.log.epoch_wall_ms), start=1):
            w.writerow([i, repr(v), int(i == result.best_epoch), f"{ms:.3f}"])
    sidecar = dict(cfg)
    sidecar["train"] = dict(cfg["train"], seed=tcfg.seed)
    config_mod.write_sidecar(sidecar, out)
    return out


def load_model(model_dir) -> TrainedModel:
    m = Path(model_dir)
    try:
        arch = ArchConfig.from_dict(json.loads((m / "arch.json").read_text()))
        norm = Normalizer.from_dict(json.loads((m / "normalizer.json").read_text()))
    except FileNotFoundError as e:
        raise WorkflowError("MODEL_MISSING", f"{model_dir} is not a model directory ({e.filename} missing)") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise WorkflowError("MODEL_CORRUPT", f"{model_dir}: {e}") from None
    try:
        gen = load_for_arch(m / "generator.spw", arch)
    except FileNotFoundError:
        raise WorkflowError("MODEL_MISSING", f"{m / 'generator.spw'} not found") from None
    return TrainedModel(gen, arch, norm)


def _check_grid(model: TrainedModel, cube: ForecastCube) -> None:
    if cube.values.shape != tuple(model.arch.input_shape[:3]):
        raise WorkflowError("SHAPE_MISMATCH", f"control cube {cube.values.shape} does not match model input "
                            f"{tuple(model.arch.input_shape[:3])}")


def predict_cube(model: TrainedModel, control: ForecastCube, mc_dropout: int | None = None,
                 seed: int = 0) -> SpreadCube:
    _check_grid(model, control)
    if mc_dropout:
        return mc_dropout_mean(model, control, n=mc_dropout, seed=seed)
    return SpreadCube(control.init_date, model.predict(control), control.grid)


def postprocess_cube(models: list[TrainedModel], control: ForecastCube) -> SpreadCube:
    for m in models:
        _check_grid(m, control)
    return multi_model_mean(models, control)


def baseline_cube(kind: str, data_dir, date: dt.date, train_spreads=None) -> SpreadCube:
    if kind == "climatology":
        train_spreads = train_spreads if train_spreads is not None else {
            d: read_spread(data_dir, d) for d in read_split(data_dir, "train")}
        return climatology_spread(train_spreads, date)
    if kind == "persistence":
        prev = date - dt.timedelta(days=1)
        archive = {}
        if (run_dir(data_dir, prev) / "spread.esc").exists():
            archive[prev] = read_spread(data_dir, prev)
        return persistence_spread(archive, date)
    raise WorkflowError("USAGE", f"unknown baseline {kind!r}")


def write_prediction(cube: SpreadCube, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cube(cube, path, dtype_code=PREDICTION_DTYPE)


def read_cube_dir(directory) -> dict[dt.date, SpreadCube]:
    """Spread cubes named ``<YYYY-MM-DD>.esc``; a data directory yields its test split."""
    p = Path(directory)
    if (p / "index.json").exists():
        return {d: read_spread(p, d) for d in read_split(p, "test")}
    if not p.is_dir():
        raise WorkflowError("DATA_MISSING", f"{directory} is not a directory")
    out = {}
    for f in sorted(p.glob("*.esc")):
        cube = read_cube_file(f, SpreadCube)
        out[cube.init_date] = cube
    if not out:
        raise WorkflowError("DATA_MISSING", f"no .esc cubes in {directory}")
    return out


def metric_config(cfg: dict, truth: Mapping[dt.date, SpreadCube]) -> MetricConfig:
    m = cfg["metrics"]
    if m["ssim_range_mode"] == "fixed":
        return MetricConfig(data_range=float(m["data_range"]), ssim_denominator=m["ssim_denominator"])
    return MetricConfig.from_spreads(truth.values(), ssim_denominator=m["ssim_denominator"])


def evaluate_dirs(cfg: dict, truth, predictions: Mapping[str, Mapping], out_dir) -> EvalReport:
    try:
        report = evaluate(predictions, truth, metric_config(cfg, truth))
    except ValueError as e:
        raise WorkflowError("EVAL_MISMATCH", str(e)) from None
    report.write(out_dir)
    config_mod.write_sidecar(cfg, out_dir)
    return report


# -- whole pipeline -----------------------------------------------------------------

def run_pipeline(cfg: dict, work_dir=None) -> EvalReport:
    """Synthesize, split, train one model per seed, predict, post-process, evaluate."""
    if work_dir is not None:
        cfg = {**cfg, "paths": {**cfg["paths"], "work_dir": str(work_dir)}}
    work = Path(cfg["paths"]["work_dir"])
    work.mkdir(parents=True, exist_ok=True)
    config_mod.write_sidecar(cfg, work)
    data = work / "data"
    synth_dataset(cfg, data)
    split_dataset(data, cfg["data"]["fractions"])
    test_dates = read_split(data, "test")
    controls = {d: read_control(data, d) for d in test_dates}
    pipe = cfg["pipeline"]
    preds: dict[str, dict[dt.date, SpreadCube]] = {}

    def emit(method: str, cubes: dict[dt.date, SpreadCube]) -> None:
        for d, cube in cubes.items():
            write_prediction(cube, work / "predictions" / method / f"{d.isoformat()}.esc")
        preds[method] = read_cube_dir(work / "predictions" / method)

    models = []
    for seed in pipe["seeds"]:
        log.info("training seed %d", seed)
        model_dir = train_model(cfg, data, work / "models" / f"seed_{seed}", seed=seed)
        model = load_model(model_dir)
        models.append(model)
        emit(f"pix2pix3d_seed{seed}", {d: predict_cube(model, c) for d, c in controls.items()})
        emit(f"dropout_pass_seed{seed}",
             {d: predict_cube(model, c, mc_dropout=1, seed=pipe["mc_seed"]) for d, c in controls.items()})
        emit(f"dropout_mean_seed{seed}",
             {d: predict_cube(model, c, mc_dropout=pipe["mc_dropout"], seed=pipe["mc_seed"])
              for d, c in controls.items()})
    if len(models) > 1:
        emit("model_mean", {d: postprocess_cube(models, c) for d, c in controls.items()})
    train_spreads = {d: read_spread(data, d) for d in read_split(data, "train")}
    emit("climatology", {d: baseline_cube("climatology", data, d, train_spreads) for d in test_dates})
    emit("persistence", {d: baseline_cube("persistence", data, d) for d in test_dates})
    truth = {d: read_spread(data, d) for d in test_dates}
    return evaluate_dirs(cfg, truth, preds, work / "report")
