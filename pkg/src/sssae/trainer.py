"""Mini-batch SGD for the joint model and for the supervised baseline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import StackedDataset
from .errors import ConfigError, NumericalError
from .evaluation import predict
from .model import ModelParams, ModelShape, init_params
from .objective import Batch, MODES, backward, batch_loss, corrupt  # noqa: F401  (corrupt re-exported)
from .tensor import STREAM_CORRUPT, STREAM_SHUFFLE, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    batch_size: int = 128
    epochs: int = 50
    lr_initial: float = 0.05
    lr_decay_start_epoch: int = 25
    lr_floor: float = 1e-4
    corruption_rate: float = 0.2
    sparsity: float = 0.0
    seed: int = 0
    patience: int | None = None  # None: no early stopping

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be > 0")
        if not 0 <= self.lr_floor <= self.lr_initial:
            raise ConfigError("need 0 <= lr_floor <= lr_initial")
        if not 0 <= self.lr_decay_start_epoch <= self.epochs:
            raise ConfigError("need 0 <= lr_decay_start_epoch <= epochs")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("corruption_rate must lie in [0, 1]")
        if self.sparsity < 0:
            raise ConfigError("sparsity must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, ignoring unrelated keys."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.name == "patience":
                kwargs[f.name] = None if raw in (None, "", "none", "None") else int(raw)
            elif f.name in ("batch_size", "epochs", "lr_decay_start_epoch", "seed"):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    e_r: float
    e_c: float
    e_total: float
    valid_acc: float
    seconds: float


@dataclass
class TrainLog:
    config: TrainConfig
    mode: str = "sssae"
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_acc: float = float("nan")

    COLUMNS = ("epoch", "lr", "e_r", "e_c", "e_total", "valid_acc", "seconds")

    def header_lines(self) -> list[str]:
        items = [("mode", self.mode)] + list(asdict(self.config).items())
        return [f"# {k} = {v}" for k, v in items]


class CsvLogWriter:
    """Writes the log incrementally: header on open, one flushed row per epoch."""

    def __init__(self, path: str | Path, log: TrainLog, include_timing: bool = True):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._timing = include_timing
        for line in log.header_lines():
            self._fh.write(line + "\n")
        self._writer = csv.writer(self._fh)
        cols = TrainLog.COLUMNS if include_timing else TrainLog.COLUMNS[:-1]
        self._writer.writerow(cols)
        self._fh.flush()

    def __call__(self, rec: EpochRecord) -> None:
        row = [rec.epoch, repr(rec.lr), repr(rec.e_r), repr(rec.e_c), repr(rec.e_total), repr(rec.valid_acc)]
        if self._timing:
            row.append(f"{rec.seconds:.3f}")
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Constant until ``lr_decay_start_epoch``, then linear down to ``lr_floor``
    at the last epoch."""
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    start = config.lr_decay_start_epoch
    if epoch < start:
        return config.lr_initial
    span = config.epochs - start
    frac = (epoch - start) / span
    return config.lr_initial + frac * (config.lr_floor - config.lr_initial)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> None:
    """In place: theta <- theta - lr * grad."""
    for p, g in zip(params.arrays(), grads.arrays()):
        p -= lr * g


def accuracy(params: ModelParams, ds: StackedDataset) -> float:
    refs = ds.eval_labels()
    preds = predict(params, ds)
    return float(np.mean(preds == refs)) if len(refs) else float("nan")


def train(
    model: ModelParams,
    train_set: StackedDataset,
    valid_set: StackedDataset,
    config: TrainConfig,
    mode: str = "sssae",
    on_epoch: Callable[[EpochRecord], None] | None = None,
    on_step: Callable[[int, int, ModelParams, ModelParams, float], None] | None = None,
    score: Callable[[ModelParams, StackedDataset], float] = accuracy,
) -> tuple[ModelParams, TrainLog]:
    """Train a copy of ``model``; return the best-validation snapshot and the log.

    ``score`` rates the validation set after every epoch (default: raw frame
    accuracy).  Only ``train_set.train_labels`` is visible here: labels of
    examples marked unlabeled are never read.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    if len(valid_set) == 0:
        raise ConfigError("validation set is empty")
    shape = model.shape
    if train_set.input_dim != shape.input_dim or valid_set.input_dim != shape.input_dim:
        raise ConfigError(
            f"dataset width {train_set.input_dim}/{valid_set.input_dim} != model input {shape.input_dim}"
        )

    params = model.copy()
    best = params.copy()
    tlog = TrainLog(config=config, mode=mode)
    if config.epochs == 0:
        return best, tlog

    inputs = train_set.inputs
    labels = train_set.train_labels
    shuffle_rng = make_rng(config.seed, STREAM_SHUFFLE)
    corrupt_rng = make_rng(config.seed, STREAM_CORRUPT)
    n = len(train_set)
    stale = 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(config, epoch)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = Batch(inputs[idx], labels[idx])
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught just below
                loss, cache = batch_loss(params, batch, config.alpha, corrupt_rng,
                                         config.corruption_rate, config.sparsity, mode)
            if not math.isfinite(loss.e_total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(params, batch, cache, config.alpha, config.sparsity, mode)
            if on_step is not None:
                on_step(epoch, b, params, grads, lr)
            sgd_step(params, grads, lr)
            w = len(idx) / n
            sums += w * np.array([loss.e_r, loss.e_c, loss.e_total])
        acc = score(params, valid_set)
        rec = EpochRecord(epoch, lr, *map(float, sums), acc, time.perf_counter() - t0)
        tlog.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d lr=%.5f e_total=%.5f valid=%.4f", epoch, lr, rec.e_total, acc)
        if tlog.best_epoch < 0 or acc > tlog.best_valid_acc:
            tlog.best_epoch, tlog.best_valid_acc = epoch, acc
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    return best, tlog


def train_supervised_baseline(
    shape: ModelShape,
    labeled_set: StackedDataset,
    valid_set: StackedDataset,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    score: Callable[[ModelParams, StackedDataset], float] = accuracy,
) -> tuple[ModelParams, TrainLog]:
    """Plain tanh-hidden softmax classifier trained on the labeled rows only.

    Decoder weights are allocated (to share the checkpoint format) but never
    used or updated.
    """
    subset = labeled_set.labeled_subset()
    if len(subset) == 0:
        raise ConfigError("baseline needs at least one labeled example")
    params = init_params(shape, config.seed)
    return train(params, subset, valid_set, config, mode="classifier", on_epoch=on_epoch, score=score)
