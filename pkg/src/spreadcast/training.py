"""Conditional-GAN training: alternating discriminator / generator Adam steps."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalizer
from .model import (
    ArchConfig,
    ModelParams,
    discriminator_forward,
    generator_forward,
    init_params,
    save_params,
)
from .numerics import (
    AdamState,
    NonFiniteError,
    RngStream,
    Tensor,
    adam_step,
    bce_with_logits,
    l1_loss,
    no_grad,
)
from .verify import cube_rmse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    lambda_l1: float = 100.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    checkpoint_every: int = 1
    zero_final_disc: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class Samples:
    """Paired physical-unit control and true-spread cubes, shape (n, T, H, W)."""

    dates: list[dt.date]
    control: np.ndarray
    spread: np.ndarray

    def __post_init__(self):
        if self.control.shape != self.spread.shape or self.control.shape[0] != len(self.dates):
            raise ValueError("control, spread and dates disagree in size")

    def __len__(self) -> int:
        return len(self.dates)

    def subset(self, idx) -> Samples:
        idx = list(idx)
        return Samples([self.dates[i] for i in idx], self.control[idx], self.spread[idx])


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    epoch_wall_ms: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)

    COLUMNS = ("step", "epoch", "d_loss", "g_adv", "g_l1", "wall_ms")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["step"], r["epoch"], repr(r["d_loss"]), repr(r["g_adv"]), repr(r["g_l1"]),
                            f"{r['wall_ms']:.3f}"])


@dataclass
class GanState:
    gen: ModelParams
    disc: ModelParams
    g_opt: AdamState
    d_opt: AdamState


def _zero(params: ModelParams) -> None:
    for t in params.values():
        t.grad = None


def _finite(name: str, t: Tensor) -> float:
    v = t.item()
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite {name}")
    return v


def gan_train_step(state: GanState, arch: ArchConfig, x: np.ndarray, y: np.ndarray,
                   cfg: TrainConfig, rng: RngStream) -> dict:
    """One discriminator update then one generator update on a normalized batch.

    Both losses come from a single forward pass, so the generator gradient is
    taken against the discriminator as it was before its update. ``x`` and
    ``y`` are ``(B, T, H, W, 1)`` in [-1, 1]. Returns the losses.
    """
    x_t = Tensor(x)
    y_t = Tensor(y)
    fake = generator_forward(state.gen, arch, x_t, dropout_active=True, rng=rng.split("dropout"),
                             bn_mode="train")
    real_logits = discriminator_forward(state.disc, arch, x_t, y_t, rng.split("noise_real"), noise_active=True)
    fake_logits = discriminator_forward(state.disc, arch, x_t, fake, rng.split("noise_fake"), noise_active=True)

    d_loss = (bce_with_logits(real_logits, 1.0) + bce_with_logits(fake_logits, 0.0)) * 0.5
    g_adv = bce_with_logits(fake_logits, 1.0)
    g_l1 = l1_loss(fake, y_t)
    g_total = g_adv + g_l1 * cfg.lambda_l1
    values = {"d_loss": _finite("discriminator loss", d_loss),
              "g_adv": _finite("generator adversarial loss", g_adv),
              "g_l1": _finite("generator L1 loss", g_l1),
              "g_total": _finite("generator loss", g_total)}

    d_params = state.disc.trainable()
    g_params = state.gen.trainable()
    _zero(state.disc)
    _zero(state.gen)
    d_loss.backward(inputs=d_params.values())
    g_total.backward(inputs=g_params.values())
    adam_step(d_params, state.d_opt)
    adam_step(g_params, state.g_opt)
    _zero(state.disc)
    _zero(state.gen)
    return values


def _batch(samples: Samples, idx, norm: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    x = norm.apply_control(samples.control[idx])[..., None]
    y = norm.apply_spread(samples.spread[idx])[..., None]
    return x, y


def predict_normalized(gen: ModelParams, arch: ArchConfig, x: np.ndarray, dropout_active: bool = False,
                       rng: RngStream | None = None) -> np.ndarray:
    """Inference pass on ``(T, H, W)`` normalized control; returns ``(T, H, W)``.

    Batch norm follows ``arch.inference_bn``; neither mode touches the
    running statistics.
    """
    with no_grad():
        out = generator_forward(gen, arch, x[None, ..., None], dropout_active=dropout_active, rng=rng,
                                bn_mode=arch.inference_bn)
    return out.data[0, ..., 0]


def predict_spread(gen: ModelParams, arch: ArchConfig, norm: Normalizer, control: np.ndarray,
                   dropout_active: bool = False, rng: RngStream | None = None) -> np.ndarray:
    """Physical-unit spread (clamped at 0) for one physical control cube."""
    y = predict_normalized(gen, arch, norm.apply_control(control), dropout_active, rng)
    return norm.invert_spread(y)


def validation_rmse(gen: ModelParams, arch: ArchConfig, norm: Normalizer, val: Samples) -> float:
    scores = [cube_rmse(predict_spread(gen, arch, norm, val.control[i]), val.spread[i]).mean()
              for i in range(len(val))]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    final: GanState
    best_gen: ModelParams
    best_epoch: int
    log: TrainLog


def train(train_set: Samples, val_set: Samples | None, arch: ArchConfig, cfg: TrainConfig,
          norm: Normalizer, checkpoint_dir: str | Path | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch; deterministic given ``cfg.seed``.

    Validation data only feeds the best-checkpoint choice (lowest RMSE of the
    denormalized prediction); with no validation set the last epoch wins.
    """
    if len(train_set) == 0:
        raise ValueError("empty training split")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("empty validation split")
    if train_set.control.shape[1:] != tuple(arch.input_shape[:3]):
        raise ValueError(f"data cubes {train_set.control.shape[1:]} do not match architecture "
                         f"input {arch.input_shape[:3]}")
    root = RngStream(cfg.seed)
    gen, disc = init_params(arch, root.split("init"), zero_final_disc=cfg.zero_final_disc)
    state = GanState(gen, disc, cfg.adam(), cfg.adam())
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    tlog = TrainLog()
    n = len(train_set)
    steps_per_epoch = -(-n // cfg.batch_size)
    best_rmse, best_gen, best_epoch = math.inf, gen.copy(), 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t_epoch = time.perf_counter()
        order = root.split("shuffle", epoch).generator().permutation(n)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            x, y = _batch(train_set, idx, norm)
            t0 = time.perf_counter()
            losses = gan_train_step(state, arch, x, y, cfg, root.split("step", step))
            step += 1
            tlog.rows.append({"step": step, "epoch": epoch, **losses,
                              "wall_ms": (time.perf_counter() - t0) * 1e3})
        tlog.epoch_wall_ms.append((time.perf_counter() - t_epoch) * 1e3)
        score = validation_rmse(state.gen, arch, norm, val_set) if val_set is not None else -epoch
        tlog.val_rmse.append(score if val_set is not None else math.nan)
        if score < best_rmse:
            best_rmse, best_gen, best_epoch = score, state.gen.copy(), epoch
            if ckpt is not None:
                save_params(best_gen, ckpt / "best.gen.spw")
        if ckpt is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_params(state.gen, ckpt / f"epoch_{epoch:03d}.gen.spw")
            save_params(state.disc, ckpt / f"epoch_{epoch:03d}.disc.spw")
        last = tlog.rows[-1]
        log.info("epoch %d: d=%.4f g_adv=%.4f g_l1=%.4f val_rmse=%.3f", epoch, last["d_loss"],
                 last["g_adv"], last["g_l1"], tlog.val_rmse[-1])
        if on_epoch is not None:
            on_epoch(epoch, state, tlog)
    return TrainResult(state, best_gen, best_epoch, tlog)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
