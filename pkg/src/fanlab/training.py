"""Training loops for the 2D/3D FAN, the guided 2D-to-3D FAN and the depth regressor."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ops
from .arch import (TINY_DEPTH, TINY_FAN, DepthRegressorConfig, FanConfig, build_2d_to_3d_fan,
                   build_depth_regressor, build_fan)
from .data.dataset import Sample
from .data.transforms import AUGMENT_PRESETS, AugmentParams, augmented_crop, sample_augment
from .errors import ConfigurationError, DataError, TrainingDiverged
from .evaluation import (CROP_MARGIN, FanPredictor, depth_errors, evaluate, guides_to_batch,
                         heatmaps_to_landmarks, images_to_batch, mean_nme, model_dtype)
from .heatmap import encode
from .nn import Module
from .optim import RmsProp, StepSchedule
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

TRAIN_KINDS = ("fan2d", "fan3d", "guided", "depth")


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "fan2d"
    learning_rate: float = 1e-4
    drop_epochs: tuple[int, ...] = (15, 30)
    drop_factor: float = 0.1
    batch_size: int = 10
    epochs: int = 40
    augment: str = "fan"
    seed: int = 0
    sigma: float = 1.0
    subpixel_targets: bool = True
    zero_guides: bool = False
    model: FanConfig | DepthRegressorConfig = TINY_FAN

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.learning_rate, tuple(self.drop_epochs), self.drop_factor)

    def validate(self) -> None:
        if self.kind not in TRAIN_KINDS:
            raise ConfigurationError(f"unknown training kind {self.kind!r}; expected one of {TRAIN_KINDS}")
        if self.augment not in AUGMENT_PRESETS:
            raise ConfigurationError(f"unknown augment preset {self.augment!r}")
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be at least 2 for batch normalisation")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if not self.learning_rate > 0 or not 0 < self.drop_factor <= 1:
            raise ConfigurationError("learning rate must be positive and drop factor in (0, 1]")
        if self.kind == "depth":
            if not isinstance(self.model, DepthRegressorConfig):
                raise ConfigurationError("depth training needs a DepthRegressorConfig")
        else:
            if not isinstance(self.model, FanConfig):
                raise ConfigurationError(f"{self.kind} training needs a FanConfig")
            if (self.kind == "guided") != self.model.guided:
                raise ConfigurationError(
                    f"{self.kind} training with in_channels={self.model.in_channels} "
                    f"for {self.model.num_landmarks} landmarks")
        self.model.validate()


def fan_preset(model: FanConfig = TINY_FAN, **overrides) -> TrainConfig:
    """rmsprop at 1e-4, dropped tenfold after epochs 15 and 30, 40 epochs, minibatch 10."""
    return replace(TrainConfig(kind="fan2d", model=model), **overrides)


def guided_preset(model: FanConfig | None = None, **overrides) -> TrainConfig:
    """Like the FAN preset but starting at 1e-3 with wider rotation and scale ranges."""
    if model is None:
        model = replace(TINY_FAN, in_channels=3 + TINY_FAN.num_landmarks)
    return replace(TrainConfig(kind="guided", learning_rate=1e-3, augment="guided", model=model), **overrides)


def depth_preset(model: DepthRegressorConfig | None = None, **overrides) -> TrainConfig:
    """Rates of the guided network, L2 loss, 50 epochs, no augmentation."""
    model = model or TINY_DEPTH
    return replace(TrainConfig(kind="depth", learning_rate=1e-3, epochs=50, augment="none", model=model),
                   **overrides)


def build_model(cfg: TrainConfig, dtype=np.float32) -> Module:
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "depth":
        return build_depth_regressor(cfg.model, rng, dtype)
    if cfg.kind == "guided":
        return build_2d_to_3d_fan(cfg.model, rng, dtype)
    return build_fan(cfg.model, rng, dtype)


@dataclass
class Batch:
    images: np.ndarray
    targets: np.ndarray  # heatmaps (B, N, h, w) or normalised depth (B, N)
    guides: np.ndarray | None
    crops: list[Sample]
    scales: np.ndarray  # per-sample canonical d


def make_batch(samples: Sequence[Sample], params: Sequence[AugmentParams], cfg: TrainConfig,
               dtype=np.float32) -> Batch:
    res = cfg.model.input_resolution
    crops = []
    for s, p in zip(samples, params):
        crop, _ = augmented_crop(s, s.bbox, res, p, CROP_MARGIN)
        crops.append(crop)
    images = images_to_batch(crops, dtype)
    if cfg.kind == "depth":
        targets = np.stack([c.landmarks.z / c.bbox.d for c in crops]).astype(dtype)
    else:
        hm = res // 4
        targets = np.stack([encode(c.landmarks, (hm, hm), cfg.sigma, scale=res / hm,
                                   subpixel=cfg.subpixel_targets).maps for c in crops]).astype(dtype)
    guides = None
    if cfg.kind in ("guided", "depth"):
        if cfg.zero_guides:
            guides = np.zeros((len(crops), len(crops[0].landmarks), res, res), dtype)
        else:
            guides = guides_to_batch([c.landmarks for c in crops], res, dtype)
    return Batch(images, targets, guides, crops, np.array([c.bbox.d for c in crops]))


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> tuple[list[np.ndarray], np.random.Generator]:
    """Shuffled full minibatches for one epoch, a pure function of (seed, epoch).

    The returned generator continues the same stream and drives augmentation.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)], rng


def loss_and_outputs(model: Module, batch: Batch, kind: str):
    x = Tensor(batch.images)
    if kind == "depth":
        pred = model(x, Tensor(batch.guides))
        return ops.mse_loss(pred, batch.targets), pred
    outs = model(x, Tensor(batch.guides) if batch.guides is not None else None)
    loss = ops.mse_loss(outs[0], batch.targets)
    for o in outs[1:]:
        loss = ops.add(loss, ops.mse_loss(o, batch.targets))
    return loss, outs[-1]


def batch_error(batch: Batch, pred: Tensor, kind: str) -> list[float]:
    """Training-batch NME (or normalised depth error) in the crop frame."""
    if kind == "depth":
        return list(np.mean(np.abs(pred.data - batch.targets), axis=1))
    res = batch.images.shape[-1]
    found = heatmaps_to_landmarks(pred.data, res / pred.shape[-1])
    errs = []
    for c, f, d in zip(batch.crops, found, batch.scales):
        vis = c.landmarks.visible
        errs.append(float(np.mean(np.linalg.norm(c.landmarks.xy[vis] - f.xy[vis], axis=1)) / d))
    return errs


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    train_loss: float
    train_error: float
    val_error: float

    def line(self) -> str:
        return (f"epoch {self.epoch:3d}  lr {self.learning_rate:.0e}  loss {self.train_loss:.6f}  "
                f"train {self.train_error:.4f}  val {self.val_error:.4f}")


@dataclass
class TrainResult:
    model: Module
    optimizer: RmsProp
    epoch: int
    history: list[EpochLog] = field(default_factory=list)


def validation_error(model: Module, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    if not samples:
        return float("nan")
    if cfg.kind == "depth":
        return float(np.mean(depth_errors(model, samples)))
    return mean_nme(evaluate(FanPredictor(model, zero_guides=cfg.zero_guides), samples))


def check_samples(samples: Sequence[Sample], cfg: TrainConfig) -> None:
    n = cfg.model.num_landmarks
    for s in samples:
        if len(s.landmarks) != n:
            raise DataError(f"sample {s.id!r} has {len(s.landmarks)} landmarks, model expects {n}")
        if cfg.kind == "depth" and s.landmarks.z is None:
            raise DataError(f"sample {s.id!r} has no depth values")


def train(cfg: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] = (),
          model: Module | None = None, optimizer: RmsProp | None = None, start_epoch: int = 0,
          finetune_epochs: int | None = None, on_epoch: Callable[[EpochLog], None] | None = None,
          dtype=np.float32) -> TrainResult:
    """Run epochs ``start_epoch+1 .. cfg.epochs``.

    Passing a model/optimizer/epoch resumes a run; the result is identical to
    an uninterrupted run because every epoch is seeded by (seed, epoch).  With
    ``finetune_epochs`` the given number of further epochs run at the lowest
    scheduled rate.
    """
    cfg.validate()
    check_samples(train_set, cfg)
    check_samples(val_set, cfg)
    if len(train_set) < cfg.batch_size:
        raise DataError(f"{len(train_set)} training samples cannot fill a minibatch of {cfg.batch_size}")
    model = model if model is not None else build_model(cfg, dtype)
    schedule = cfg.schedule
    optimizer = optimizer or RmsProp(model.named_parameters(), schedule.initial)
    aug = AUGMENT_PRESETS[cfg.augment]
    if finetune_epochs is not None:
        epochs = range(start_epoch + 1, start_epoch + finetune_epochs + 1)
        lr_for = lambda e: schedule.final
    else:
        epochs = range(start_epoch + 1, cfg.epochs + 1)
        lr_for = schedule.lr_at
    result = TrainResult(model, optimizer, start_epoch)
    emit = on_epoch or (lambda entry: log.info(entry.line()))
    if start_epoch == 0 and finetune_epochs is None:
        entry = EpochLog(0, lr_for(1), float("nan"), float("nan"), validation_error(model, val_set, cfg))
        result.history.append(entry)
        emit(entry)
    for epoch in epochs:
        optimizer.learning_rate = lr_for(epoch)
        batches, rng = batch_order(len(train_set), cfg.batch_size, cfg.seed, epoch)
        losses, errors = [], []
        model.train()
        for idx in batches:
            params = [sample_augment(aug, rng) for _ in idx]
            batch = make_batch([train_set[i] for i in idx], params, cfg, model_dtype(model))
            optimizer.zero_grad()
            with Tape() as tape:
                loss, pred = loss_and_outputs(model, batch, cfg.kind)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            tape.backward(loss)
            optimizer.step()
            losses.append(value)
            errors.extend(batch_error(batch, pred, cfg.kind))
        entry = EpochLog(epoch, optimizer.learning_rate, float(np.mean(losses)), float(np.mean(errors)),
                         validation_error(model, val_set, cfg))
        result.history.append(entry)
        result.epoch = epoch
        emit(entry)
    model.eval()
    return result
