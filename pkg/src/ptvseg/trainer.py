"""Mini-batch training loop with early stopping on the validation loss.

A training sample is an (image, mask) pair of float arrays shaped
[channels, H, W]; the mask is binary. Each epoch visits every sample
once in a seeded shuffled order, processes batches of ``batch_size``
(the final short batch as-is), and applies one optimizer step per batch
on gradients averaged over the batch. Per-sample losses are the fused
logit losses from :mod:`ptvseg.losses`, so the per-sample Dice is
averaged across the batch rather than pooled.

Early stopping: an epoch counts as a significant improvement when its
validation loss beats the previous best by a relative margin of at
least ``min_delta``; training stops once ``patience`` consecutive
epochs lack one (or at ``max_epochs``). The checkpoint kept and
reported is the one with the best validation loss seen, not the final
one.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses, unet
from .errors import ConfigError
from .unet import UNetModel

ADAM = "adam"
SGD = "sgd"

EPOCH_CSV_HEADER = ["epoch", "train_loss", "val_loss", "stopped_flag"]

TrainSample = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-5
    loss: str = losses.BCEL
    patience: int = 10
    min_delta: float = 1e-3
    max_epochs: int = 100
    seed: int = 0
    optimizer: str = ADAM  # plain SGD kept for fidelity experiments

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.loss not in losses.LOSS_KINDS:
            raise ConfigError(f"loss must be one of {losses.LOSS_KINDS}, got {self.loss!r}")
        if self.optimizer not in (ADAM, SGD):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class AdamMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamMoments":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on params and moments."""
    moments.t += 1
    t = moments.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        p -= lr * g


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    stopped: bool


@dataclass
class TrainState:
    model: UNetModel
    moments: AdamMoments
    epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    best_model: UNetModel | None = None

    @classmethod
    def fresh(cls, model: UNetModel) -> "TrainState":
        return cls(model=model, moments=AdamMoments.zeros_like(model.parameters()))


def _sample_loss_and_grads(
    model: UNetModel, sample: TrainSample, kind: str
) -> tuple[float, list[unet.KernelGrad]]:
    image, mask = sample
    _, cache = unet.unet_forward(model, image)
    lv = losses.loss_from_logits(cache.logits, mask, kind)
    return lv.scalar, unet.unet_backward_from_logits(model, cache, lv.grad)


def train_epoch(state: TrainState, train_set: list[TrainSample], config: TrainConfig) -> float:
    """Run one epoch over train_set; returns (and records) the mean train loss."""
    if not train_set:
        raise ConfigError("training set is empty")
    order = np.random.default_rng(np.random.SeedSequence((config.seed, state.epoch))).permutation(
        len(train_set)
    )
    params = state.model.parameters()
    total = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        batch_grads: list[np.ndarray] | None = None
        batch_loss = 0.0
        for i in batch:
            loss, kgrads = _sample_loss_and_grads(state.model, train_set[i], config.loss)
            batch_loss += loss
            flat = unet.grad_arrays(kgrads)
            if batch_grads is None:
                batch_grads = flat
            else:
                for acc, g in zip(batch_grads, flat):
                    acc += g
        n = len(batch)
        for g in batch_grads:
            g /= n
        if config.optimizer == ADAM:
            adam_step(params, batch_grads, state.moments, config.learning_rate)
        else:
            sgd_step(params, batch_grads, config.learning_rate)
        total += batch_loss
    return total / len(train_set)


def evaluate_loss(model: UNetModel, dataset: list[TrainSample], kind: str) -> float:
    """Mean loss over a dataset; touches no parameters."""
    if not dataset:
        raise ConfigError("evaluation set is empty")
    total = 0.0
    for image, mask in dataset:
        _, cache = unet.unet_forward(model, image)
        total += losses.loss_from_logits(cache.logits, mask, kind).scalar
    return total / len(dataset)


def record_validation(state: TrainState, val_loss: float, config: TrainConfig) -> None:
    """Update best loss, improvement counter, and best-model snapshot."""
    prev_best = state.best_val_loss
    significant = val_loss < prev_best * (1.0 - config.min_delta) if np.isfinite(prev_best) else True
    state.epochs_since_improvement = 0 if significant else state.epochs_since_improvement + 1
    if val_loss < prev_best:
        state.best_val_loss = val_loss
        state.best_model = state.model.copy()


def should_stop(state: TrainState, config: TrainConfig) -> bool:
    """True when patience ran out or the epoch budget is exhausted."""
    return state.epochs_since_improvement >= config.patience or state.epoch >= config.max_epochs


@dataclass
class TrainResult:
    best_model: UNetModel
    final_model: UNetModel
    history: list[EpochRecord]
    best_val_loss: float


def run_training(
    model: UNetModel,
    train_set: list[TrainSample],
    val_set: list[TrainSample],
    config: TrainConfig,
    out_dir: str | None = None,
) -> TrainResult:
    """Train until early stopping; optionally write epochs.csv + checkpoint.bin.

    Fully deterministic: (seed, data, config) determine every parameter
    of the resulting checkpoint.
    """
    state = TrainState.fresh(model)
    while True:
        train_loss = train_epoch(state, train_set, config)
        state.epoch += 1
        val_loss = evaluate_loss(state.model, val_set, config.loss)
        record_validation(state, val_loss, config)
        stop = should_stop(state, config)
        state.history.append(EpochRecord(state.epoch, train_loss, val_loss, stop))
        if stop:
            break
    if state.best_model is None:  # every epoch diverged; fall back to the last
        state.best_model = state.model.copy()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_epoch_csv(os.path.join(out_dir, "epochs.csv"), state.history)
        unet.save_checkpoint(state.best_model, os.path.join(out_dir, "checkpoint.bin"))
    return TrainResult(state.best_model, state.model, state.history, state.best_val_loss)


def write_epoch_csv(path: str, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_CSV_HEADER)
        for rec in history:
            w.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_loss:.6f}", int(rec.stopped)])
