"""``spreadcast`` command line.

Failures print one line ``error: CODE: message`` on stderr and exit nonzero
(2 for usage errors, 1 otherwise). ``SPREADCAST_THREADS`` caps the BLAS
thread pool; set it to 1 for bitwise-reproducible runs across machines.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import workflow as wf
from .data import CubeFormatError
from .model import ArchError, WeightFileError
from .numerics import NonFiniteError
from .verify import BaselineError

log = logging.getLogger("spreadcast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _sidecar_dir(out: Path) -> Path:
    return out.parent if out.suffix == ".esc" else out


def _batch_dates(args) -> list[dt.date]:
    return wf.read_split(args.data, args.split)


# -- commands -----------------------------------------------------------------------

def cmd_synth(args, cfg):
    wf.synth_dataset(cfg, args.out)
    config_mod.write_sidecar(cfg, args.out)


def cmd_split(args, cfg):
    parts = wf.split_dataset(args.data, cfg["data"]["fractions"])
    config_mod.write_sidecar(cfg, Path(args.data) / "split")
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))


def cmd_train(args, cfg):
    wf.train_model(cfg, args.data, args.out, seed=args.seed)


def cmd_predict(args, cfg):
    model = wf.load_model(args.model)
    out = Path(args.out)
    if args.control:
        cube = wf.predict_cube(model, wf.read_cube_file(Path(args.control)), args.mc_dropout, args.seed)
        wf.write_prediction(cube, out)
    else:
        for d in _batch_dates(args):
            cube = wf.predict_cube(model, wf.read_control(args.data, d), args.mc_dropout, args.seed)
            wf.write_prediction(cube, out / f"{d.isoformat()}.esc")
    config_mod.write_sidecar(cfg, _sidecar_dir(out))


def cmd_baseline(args, cfg):
    out = Path(args.out)
    if args.date:
        wf.write_prediction(wf.baseline_cube(args.kind, args.data, args.date), out)
    else:
        train_spreads = None
        if args.kind == "climatology":
            train_spreads = {d: wf.read_spread(args.data, d) for d in wf.read_split(args.data, "train")}
        for d in _batch_dates(args):
            cube = wf.baseline_cube(args.kind, args.data, d, train_spreads)
            wf.write_prediction(cube, out / f"{d.isoformat()}.esc")
    config_mod.write_sidecar(cfg, _sidecar_dir(out))


def cmd_postprocess(args, cfg):
    models = [wf.load_model(m) for m in args.models]
    out = Path(args.out)
    if args.control:
        wf.write_prediction(wf.postprocess_cube(models, wf.read_cube_file(Path(args.control))), out)
    else:
        for d in _batch_dates(args):
            cube = wf.postprocess_cube(models, wf.read_control(args.data, d))
            wf.write_prediction(cube, out / f"{d.isoformat()}.esc")
    config_mod.write_sidecar(cfg, _sidecar_dir(out))


def cmd_evaluate(args, cfg):
    truth = wf.read_cube_dir(args.truth)
    preds = {}
    for item in args.pred:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        if name in preds:
            raise UsageError(f"duplicate method name {name!r}")
        preds[name] = wf.read_cube_dir(path)
    report = wf.evaluate_dirs(cfg, truth, preds, args.out)
    for name, s in report.summary().items():
        print(f"{name}\trmse={s['rmse']:.4f}\tssim={s['ssim']:.4f}")


def cmd_pipeline(args, cfg):
    report = wf.run_pipeline(cfg, args.work_dir)
    for name, s in report.summary().items():
        print(f"{name}\trmse={s['rmse']:.4f}\tssim={s['ssim']:.4f}")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spreadcast", description="Predict ensemble spread from a control forecast.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="run configuration (JSON)")
        s.set_defaults(func=func)
        return s

    s = add("synth", cmd_synth, "synthesize ensemble runs")
    s.add_argument("--out", required=True)

    s = add("split", cmd_split, "chronological train/val/test split")
    s.add_argument("--data", required=True)

    s = add("train", cmd_train, "train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override train.seed")

    def batch_args(s, single):
        s.add_argument(single)
        s.add_argument("--data", help="data directory (batch mode, with --split)")
        s.add_argument("--split", default="test", choices=wf.SPLITS)
        s.add_argument("--out", required=True)

    s = add("predict", cmd_predict, "predict spread for control cubes")
    s.add_argument("--model", required=True)
    batch_args(s, "--control")
    s.add_argument("--mc-dropout", type=int, metavar="N", help="average N dropout-active passes")
    s.add_argument("--seed", type=int, default=0)

    s = add("baseline", cmd_baseline, "climatology or persistence spread")
    s.add_argument("--kind", required=True, choices=("climatology", "persistence"))
    s.add_argument("--data", required=True)
    s.add_argument("--date", type=_date)
    s.add_argument("--split", default="test", choices=wf.SPLITS)
    s.add_argument("--out", required=True)

    s = add("postprocess", cmd_postprocess, "average the predictions of several models")
    s.add_argument("--models", nargs="+", required=True)
    batch_args(s, "--control")

    s = add("evaluate", cmd_evaluate, "score predictions against the true spread")
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", nargs="+", required=True, metavar="[NAME=]DIR")
    s.add_argument("--out", required=True)

    s = add("pipeline", cmd_pipeline, "run every step end to end")
    s.add_argument("--work-dir", help="override paths.work_dir")
    return p


def _check_args(args) -> None:
    if args.command in ("predict", "postprocess"):
        if bool(args.control) == bool(args.data):
            raise UsageError("give exactly one of --control FILE or --data DIR")
        if args.command == "predict" and args.mc_dropout is not None and args.mc_dropout < 1:
            raise UsageError("--mc-dropout must be at least 1")


def _threads() -> int | None:
    raw = os.environ.get("SPREADCAST_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise config_mod.ConfigError(f"SPREADCAST_THREADS must be a positive integer, got {raw!r}")
    return n


_ERROR_CODES = (
    (config_mod.ConfigError, "CONFIG_INVALID"),
    (ArchError, "ARCH_INVALID"),
    (WeightFileError, "MODEL_CORRUPT"),
    (CubeFormatError, "FORMAT_ERROR"),
    (BaselineError, "BASELINE_UNAVAILABLE"),
    (NonFiniteError, "NONFINITE"),
    (OSError, "IO_ERROR"),
    (ValueError, "INVALID_INPUT"),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _check_args(args)
    except UsageError as e:
        print(f"error: USAGE: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        threads = _threads()
        cfg = config_mod.load(args.config)
        with threadpool_limits(limits=threads):
            args.func(args, cfg)
    except UsageError as e:
        print(f"error: USAGE: {e}", file=sys.stderr)
        return 2
    except wf.WorkflowError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every failure maps to one coded line
        for kind, code in _ERROR_CODES:
            if isinstance(e, kind):
                print(f"error: {code}: {e}", file=sys.stderr)
                return 1
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
