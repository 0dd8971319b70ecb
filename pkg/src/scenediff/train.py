"""Supervised training: minimise the mean squared error between the four
predicted maps and the ground-truth bitmaps with Adam."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evalkit
from .labels import CHANNELS, resize_pair
from .tensor import Adam, mse_loss
from .unet import UNetModel, binarize, maps_to_target, pair_to_input, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    threshold: float = 0.5
    checkpoint_every: int = 0  # in steps; 0 disables intermediate checkpoints

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metrics: dict | None = None  # channel -> (precision, recall, accuracy)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return [r.loss for r in self.records]

    def write_csv(self, path) -> None:
        cols = ["epoch", "loss"] + [f"{c}_{m}" for c in CHANNELS
                                    for m in ("precision", "recall", "accuracy")]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [r.epoch, repr(r.loss)]
                for c in CHANNELS:
                    row += [repr(v) for v in r.metrics[c]] if r.metrics else ["", "", ""]
                w.writerow(row)


def loss(pred: np.ndarray, target) -> tuple[float, np.ndarray]:
    """MSE over all four channels jointly; ``target`` may be ChangeMaps."""
    if not isinstance(target, np.ndarray):
        target = maps_to_target(target)
    return mse_loss(pred, target)


def train_step(model: UNetModel, batch, opt: Adam) -> float:
    """One forward/backward/update on ``batch = (x, y)``; returns the pre-step loss."""
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    model.train()
    value, grad = loss(model.forward(x), y)
    model.backward(grad)
    opt.step()
    return value


def prepare(dataset, size):
    """Stack a list of (ImagePair, ChangeMaps) into network arrays at ``size``."""
    h, w = size
    resized = [resize_pair(p, m, h, w) for p, m in dataset]
    return pair_to_input([p for p, _ in resized]), maps_to_target([m for _, m in resized])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def evaluate_arrays(model: UNetModel, x, y, threshold, batch_size=8) -> dict:
    model.eval()
    counts = None
    for i in range(0, len(x), batch_size):
        pred = binarize(model.forward(x[i:i + batch_size]), threshold)
        c = evalkit.confusion_stack(np.stack([p.stack() for p in pred]), y[i:i + batch_size])
        counts = c if counts is None else [a + b for a, b in zip(counts, c)]
    return {name: evalkit.metrics(c) for name, c in zip(CHANNELS, counts)}


def fit(model: UNetModel, dataset, cfg: TrainConfig, out_dir=None, val=None,
        optimizer: Adam | None = None) -> TrainHistory:
    """Train for ``cfg.epochs`` epochs with a per-(seed, epoch) shuffle.

    Writes ``history.csv``, ``ckpt-<step>.sdck`` every ``checkpoint_every``
    steps and a final checkpoint when ``out_dir`` is given.  If a checkpoint
    write fails the exception carries the history so far as ``.history``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    x, y = prepare(dataset, model.config.input_size)
    val_arrays = prepare(val, model.config.input_size) if val else None
    opt = optimizer or Adam(model.parameters(), lr=cfg.lr)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    n, step = len(x), 0
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total += train_step(model, (x[idx], y[idx]), opt) * len(idx)
            step += 1
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _checkpoint(model, out_dir / f"ckpt-{step}.sdck", history)
        metrics = None
        if val_arrays is not None:
            metrics = evaluate_arrays(model, *val_arrays, cfg.threshold)
        history.records.append(EpochRecord(epoch, total / n, metrics))
        log.info("epoch %d loss %.5f", epoch, total / n)
        if out_dir is not None:
            history.write_csv(out_dir / "history.csv")
    if out_dir is not None:
        _checkpoint(model, out_dir / f"ckpt-{step}.sdck", history)
        _checkpoint(model, out_dir / "final.sdck", history)
    return history


def _checkpoint(model, path, history):
    try:
        save_checkpoint(model, path)
    except OSError as e:
        e.history = history
        raise


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
