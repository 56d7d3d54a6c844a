"""Epoch loop, evaluation and seeded randomness shared by the CLI and the
ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Split, iterate_batches
from .errors import DatasetError, ParameterError
from .model import DNet, predict, train_step
from .optim import AdamState


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Per-epoch generator, so a resumed run shuffles exactly like an unbroken one."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_acc: float


@dataclass
class History:
    records: list = field(default_factory=list)
    best_acc: float = -1.0
    best_epoch: Optional[int] = None

    @property
    def final_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


def accuracy(model: DNet, split: Split, batch_size: int = 32) -> float:
    """Instance accuracy; an empty split is an error, never NaN."""
    if len(split) == 0:
        raise DatasetError("cannot evaluate on an empty split")
    return float(np.mean(predict(model, split.points, batch_size) == split.labels))


def per_class_accuracy(model: DNet, split: Split, num_classes: int, batch_size: int = 32) -> np.ndarray:
    """Accuracy per class label; NaN for classes absent from ``split``."""
    if len(split) == 0:
        raise DatasetError("cannot evaluate on an empty split")
    pred = predict(model, split.points, batch_size)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = split.labels == c
        if mask.any():
            out[c] = np.mean(pred[mask] == c)
    return out


def train_epochs(model: DNet, train: Split, test: Optional[Split], epochs: int, batch_size: int = 16,
                 lr: float = 1e-3, seed: int = 0, state: Optional[AdamState] = None, start_epoch: int = 1,
                 on_epoch: Optional[Callable[[EpochRecord, AdamState, bool], None]] = None) -> History:
    """Run ``epochs`` epochs numbered from ``start_epoch``.

    Each epoch shuffles with :func:`epoch_rng` and evaluates on ``test``
    (skipped when ``test`` is None, recording NaN). ``on_epoch(record,
    state, improved)`` runs after every epoch; ``improved`` flags a new best
    test accuracy.
    """
    if epochs < 0:
        raise ParameterError("epochs must be non-negative")
    if len(train) == 0 and epochs > 0:
        raise DatasetError("training split is empty")
    state = state if state is not None else AdamState.for_params(model.parameters())
    history = History()
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = epoch_rng(seed, epoch)
        losses = []
        for idx in iterate_batches(len(train), batch_size, rng):
            losses.append(train_step(model, train.points[idx], train.labels[idx], state, lr, rng))
        acc = accuracy(model, test) if test is not None else float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), acc)
        history.records.append(rec)
        improved = acc > history.best_acc
        if improved:
            history.best_acc, history.best_epoch = acc, epoch
        if on_epoch is not None:
            on_epoch(rec, state, improved)
    return history
