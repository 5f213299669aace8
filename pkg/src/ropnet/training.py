"""Mini-batch training, evaluation metrics and epoch-history export."""

from __future__ import annotations

import csv
import functools
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import backward, forward_record
from .data.manifest import Manifest, weighted_sampler
from .data.ppm import load_ppm
from .data.preprocess import prepare
from .errors import DataError, NumericError, ParameterError
from .model import ModelSpec, forward
from .optim import AdamState, adam_step, bce_grad, bce_loss

THRESHOLD = 0.5
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    fine_tune: bool = False
    weight_low: float = 2.0
    weight_high: float = 1.0
    input_size: int = 64
    width_multiplier: float = 1.0
    train_eval_size: int = 512

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None = None
    val_acc: float | None = None


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def count(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_counts(cls, tp, fp, tn, fn):
        n = tp + fp + tn + fn
        accuracy = (tp + tn) / n if n else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, tn, fn, accuracy, precision, recall, f1, tp + fp == 0, tp + fn == 0)

    @classmethod
    def from_predictions(cls, labels, predictions):
        y = np.asarray(labels).astype(int).ravel()
        p = np.asarray(predictions).astype(int).ravel()
        return cls.from_counts(
            int(np.sum((p == 1) & (y == 1))),
            int(np.sum((p == 1) & (y == 0))),
            int(np.sum((p == 0) & (y == 0))),
            int(np.sum((p == 0) & (y == 1))),
        )

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --------------------------------------------------------------------------
# image loading


@functools.lru_cache(maxsize=16384)
def _prepared(path, mtime_ns, size):
    return prepare(load_ppm(path), size)


def load_images(records, size):
    """Stack preprocessed ``[size, size, 3]`` tensors for ``records``."""
    out = np.empty((len(records), size, size, 3), dtype=np.float32)
    for i, rec in enumerate(records):
        path = str(rec.path)
        out[i] = _prepared(path, os.stat(path).st_mtime_ns, size)
    return out


def labels_of(records):
    return np.array([[float(r.label)] for r in records], dtype=np.float32)


def predict(spec: ModelSpec, params, images, chunk=64):
    """Infer-mode probabilities, shape ``[N]``.

    Kernels compute every example independently, so chunking does not change
    any value.
    """
    probs = [forward(spec, params, images[i:i + chunk], "infer")[:, 0] for i in range(0, len(images), chunk)]
    return np.concatenate(probs) if probs else np.empty(0, dtype=np.float32)


def _loss_and_accuracy(spec, params, images, labels):
    probs = predict(spec, params, images)[:, None]
    loss = bce_loss(labels, probs)
    acc = float(np.mean((probs >= THRESHOLD) == (labels == 1)))
    return loss, acc


def training_records(manifest: Manifest, fine_tune):
    manifest.require_valid()
    if fine_tune:
        records = [r for r in manifest.records if r.split in ("train", "test")] or list(manifest.records)
        return records, []
    train_rows, test_rows = manifest.subset("train"), manifest.subset("test")
    if not train_rows:
        raise DataError("manifest has no train rows; run `split` first")
    if not test_rows:
        raise DataError("manifest has no test rows for validation; use fine-tune mode to train on everything")
    return train_rows, test_rows


def train(spec: ModelSpec, params, manifest: Manifest, config: TrainConfig, progress=None):
    """Train a private copy of ``params``; returns ``(params, [EpochStats])``.

    Each epoch draws ``ceil(N_train / batch_size)`` batches from the
    quality-weighted sampler.  Epoch-end train statistics use a fixed seeded
    subsample of at most ``train_eval_size`` images in infer mode; validation
    statistics use the test split and are omitted in fine-tune mode.
    """
    train_rows, val_rows = training_records(manifest, config.fine_tune)
    if not train_rows:
        raise DataError("no training images")
    size = spec.input_shape[0]
    x_train = load_images(train_rows, size)
    y_train = labels_of(train_rows)
    x_val = load_images(val_rows, size) if val_rows else None
    y_val = labels_of(val_rows) if val_rows else None

    params = {k: v.copy() for k, v in params.items()}
    state = AdamState(lr=config.lr)
    sampler = weighted_sampler(train_rows, config.weight_low, config.weight_high, config.seed)
    n = len(train_rows)
    eval_rng = np.random.default_rng([config.seed, 1])
    eval_idx = np.sort(eval_rng.choice(n, size=min(n, config.train_eval_size), replace=False))
    steps = math.ceil(n / config.batch_size)
    momenta = {layer.name: layer.momentum for layer in spec.layers if layer.kind == "batch_norm"}

    history = []
    for epoch in range(1, config.epochs + 1):
        for step in range(steps):
            idx = [next(sampler) for _ in range(config.batch_size)]
            yb = y_train[idx]
            out, tape = forward_record(spec, x_train[idx], params, mode="train")
            try:
                loss = bce_loss(yb, out)
                if not math.isfinite(loss):
                    raise NumericError("non-finite loss")
                adam_step(params, backward(tape, bce_grad(yb, out)), state)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {step + 1}: {exc}") from exc
            for name, (mean, var) in tape.batch_statistics().items():
                m = momenta[name]
                rm, rv = params[f"{name}.running_mean"], params[f"{name}.running_var"]
                rm *= 1 - m
                rm += m * mean
                rv *= 1 - m
                rv += m * var
        try:
            stats = EpochStats(epoch, *_loss_and_accuracy(spec, params, x_train[eval_idx], y_train[eval_idx]))
            if x_val is not None:
                stats.val_loss, stats.val_acc = _loss_and_accuracy(spec, params, x_val, y_val)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, end-of-epoch statistics: {exc}") from exc
        history.append(stats)
        if progress is not None:
            progress(stats)
    return params, history


def evaluate(spec: ModelSpec, params, manifest: Manifest, split="test", threshold=THRESHOLD):
    """Image-level confusion counts and metrics for one split (``all`` for every row)."""
    records = manifest.records if split == "all" else manifest.subset(split)
    if not records:
        raise DataError(f"manifest has no rows in split {split!r}")
    manifest.require_valid()
    probs = predict(spec, params, load_images(records, spec.input_shape[0]))
    return MetricsReport.from_predictions(labels_of(records), probs >= threshold)


# --------------------------------------------------------------------------
# history CSV


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def export_history(stats, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for s in stats:
            writer.writerow([s.epoch, _fmt(s.train_loss), _fmt(s.train_acc), _fmt(s.val_loss), _fmt(s.val_acc)])
    return Path(path)


def read_history(path):
    def num(text):
        return float(text) if text else None

    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochStats(int(r["epoch"]), num(r["train_loss"]), num(r["train_acc"]), num(r["val_loss"]), num(r["val_acc"]))
        for r in rows
    ]
