"""Squared-error loss, Adagrad, and the epoch loop with early stopping."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nx
from .model import Forecaster, SampleSource, compute_feature_bank, load_state, state_dict
from .numeric import NumericError, Param, Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128  # the alternate reported setting is 80
    learning_rate: float = 1e-4
    max_epochs: int = 150
    patience: int = 6
    cnn_freeze_epochs: int = 20
    seed: int = 0
    loss_kind: str = "squared_error"
    epoch_samples: int = 0  # 0: every training sample each epoch
    cache_frozen_features: bool = True
    cnn_lr_scale: float = 1.0  # multiplies learning_rate for CNN weights once unfrozen

    def validate(self) -> "TrainConfig":
        if self.patience < 1:
            raise nx.ConfigurationError("patience must be >= 1")
        if not self.learning_rate > 0:
            raise nx.ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise nx.ConfigurationError("batch_size and max_epochs must be >= 1")
        if not self.cnn_lr_scale > 0:
            raise nx.ConfigurationError("cnn_lr_scale must be positive")
        if self.cnn_freeze_epochs < 0 or self.epoch_samples < 0:
            raise nx.ConfigurationError("cnn_freeze_epochs and epoch_samples must be >= 0")
        if self.loss_kind != "squared_error":
            raise nx.ConfigurationError(f"unknown loss_kind {self.loss_kind!r}")
        return self


def loss(pred, target) -> Tensor:
    """Summed squared error over (start, end), averaged over any leading batch axis."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    per_sample = nx.tsum(nx.square(pred - target), axis=-1)
    return nx.mean(per_sample) if per_sample.ndim else per_sample


class AdagradState:
    """Running sum of squared gradients per parameter."""

    def __init__(self, params: list[Param], eps: float = 1e-8):
        self.eps = eps
        self.accumulators = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, params: list[Param], lr: float, scales: dict[str, float] | None = None) -> None:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in {p.name!r}")
        for p in params:
            acc = self.accumulators[p.name]
            acc += p.grad * p.grad
            rate = lr * scales.get(p.name, 1.0) if scales else lr
            p.data -= rate * p.grad / (np.sqrt(acc) + self.eps)
            p.zero_grad()


def adagrad_step(state: AdagradState, params: list[Param], lr: float) -> None:
    state.step(params, lr)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path: str | os.PathLike) -> None:
        """Loss history only, so reruns with one seed produce identical bytes."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va)])

    def write_timing_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for i, s in enumerate(self.seconds, start=1):
                w.writerow([i, f"{s:.3f}"])


def batch_loss(model: Forecaster, source: SampleSource, origins: np.ndarray,
               bank: dict | None = None) -> Tensor:
    batch = source.build_batch(origins[:, 0], origins[:, 1], origins[:, 2],
                               with_patches=bank is None)
    return loss(model.forward_batch(batch, bank), batch.target)


def mean_loss(model: Forecaster, source: SampleSource, origins: np.ndarray,
              batch_size: int = 512, bank: dict | None = None) -> float:
    total = 0.0
    with nx.no_grad():
        for lo in range(0, len(origins), batch_size):
            chunk = origins[lo:lo + batch_size]
            total += batch_loss(model, source, chunk, bank).item() * len(chunk)
    return total / len(origins)


def fit(model: Forecaster, source: SampleSource, train_origins: np.ndarray,
        val_origins: np.ndarray, cfg: TrainConfig) -> History:
    """Train in place; the model ends holding the best-validation weights.

    The CNN stays frozen for the first ``cnn_freeze_epochs`` epochs and is
    fine-tuned afterwards. While frozen, its features are computed once per
    grid cell and interval and reused.
    """
    cfg.validate()
    if len(train_origins) == 0 or len(val_origins) == 0:
        raise ValueError("fit needs non-empty training and validation sets")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdagradState(params)
    scales = {p.name: cfg.cnn_lr_scale for p in model.cnn_parameters()} if cfg.cnn_lr_scale != 1.0 else None
    history = History()
    best, best_state, wait = math.inf, state_dict(model), 0
    bank = None
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        frozen = epoch <= cfg.cnn_freeze_epochs
        model.set_cnn_trainable(not frozen)
        if frozen and cfg.cache_frozen_features:
            if bank is None:
                bank = compute_feature_bank(model, source)
        else:
            bank = None
        trainable = [p for p in params if p.requires_grad]
        order = rng.permutation(len(train_origins))
        if cfg.epoch_samples:
            order = order[:cfg.epoch_samples]
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = train_origins[order[lo:lo + cfg.batch_size]]
            value = batch_loss(model, source, chunk, bank)
            if not math.isfinite(value.item()):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}")
            value.backward()
            state.step(trainable, cfg.learning_rate, scales)
            total += value.item() * len(chunk)
        train_loss = total / len(order)
        val_loss = mean_loss(model, source, val_origins, bank=bank)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - started)
        logger.info("epoch %d train %.6g val %.6g%s", epoch, train_loss, val_loss,
                    " (cnn frozen)" if frozen else "")
        if val_loss < best:
            best, best_state, wait = val_loss, state_dict(model), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                history.stopped_early = True
                break
    model.set_cnn_trainable(True)
    load_state(model, best_state)
    return history


def split_origins(source: SampleSource, test_start: int, val_fraction: float = 0.2,
                  validation: str = "holdout") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train, validation and test origins.

    Test origins are those whose target lies at or after ``test_start``. With
    ``validation="holdout"`` the remaining origins are split in time and the
    last ``val_fraction`` of their distinct intervals validates. With
    ``validation="test"`` the test origins double as the validation set.
    """
    before = source.origins(0, test_start - 1)
    test = source.origins(test_start - 1)
    if validation == "test":
        return before, test, test
    if validation != "holdout":
        raise nx.ConfigurationError(f"validation must be 'holdout' or 'test', got {validation!r}")
    times = np.unique(before[:, 0])
    if len(times) < 2:
        raise ValueError("not enough training intervals to hold out a validation span")
    n_val = min(len(times) - 1, max(1, int(round(len(times) * val_fraction))))
    cut = times[-n_val]
    return before[before[:, 0] < cut], before[before[:, 0] >= cut], test
