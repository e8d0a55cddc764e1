"""Dataset splits, the batch-size-1 training loop and evaluation metrics."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .capsnet import CapsNet, RMSProp, compute_loss
from .errors import DivergedLoss, EmptyVector, TooFewSamples

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_acc", "train_loss", "val_acc", "val_loss", "seconds")


@dataclass(frozen=True, eq=False)
class LabeledSample:
    grid: object  # VoxelGrid2D | VoxelGrid3D | ndarray
    label: int
    source_id: str = ""

    @property
    def data(self) -> np.ndarray:
        return getattr(self.grid, "data", self.grid)


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    records: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray] = field(repr=False)


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _allocate(class_sizes: list[int], fractions: Sequence[float]) -> np.ndarray:
    """Integer (class x split) table with exact row sums and split totals."""
    totals = largest_remainder(sum(class_sizes), fractions)
    quotas = np.outer(class_sizes, fractions)
    table = np.floor(quotas).astype(int)
    row_left = np.array(class_sizes) - table.sum(1)
    col_left = np.array(totals) - table.sum(0)
    frac = quotas - table
    cells = sorted(np.ndindex(*table.shape), key=lambda cs: (-frac[cs], cs))
    for c, s in cells:
        if row_left[c] > 0 and col_left[s] > 0 and frac[c, s] > 0:
            table[c, s] += 1
            row_left[c] -= 1
            col_left[s] -= 1
    for c, s in cells:
        while row_left[c] > 0 and col_left[s] > 0:
            table[c, s] += 1
            row_left[c] -= 1
            col_left[s] -= 1

    # keep every class in every split when that is possible, via 2x2 swaps
    n_splits = len(fractions)
    for c, s in zip(*np.nonzero(table == 0)):
        if class_sizes[c] < n_splits:
            continue
        for s2 in np.argsort(-table[c], kind="stable"):
            if table[c, s2] <= 1:
                break
            donors = [c2 for c2 in range(len(class_sizes)) if c2 != c and table[c2, s] > 1]
            if donors:
                c2 = donors[0]
                table[c, s] += 1
                table[c, s2] -= 1
                table[c2, s] -= 1
                table[c2, s2] += 1
                break
    return table


def split(dataset: Sequence[LabeledSample], config: SplitConfig = SplitConfig()):
    """Deterministic stratified shuffle-split into (train, val, test)."""
    if len(dataset) < 3:
        raise TooFewSamples(f"need at least 3 samples to split, got {len(dataset)}")
    labels = sorted({s.label for s in dataset})
    rng = np.random.default_rng(config.seed)
    by_class = []
    for lab in labels:
        idx = np.array([i for i, s in enumerate(dataset) if s.label == lab])
        by_class.append(idx[rng.permutation(idx.size)])
    table = _allocate([idx.size for idx in by_class], config.fractions)
    parts: list[list[int]] = [[], [], []]
    for idx, row in zip(by_class, table):
        start = 0
        for s, n in enumerate(row):
            parts[s].extend(idx[start : start + n].tolist())
            start += n
    return tuple([dataset[i] for i in sorted(p)] for p in parts)


# -- inference ---------------------------------------------------------------


def predict(model: CapsNet, grid) -> tuple[int, np.ndarray]:
    """(class index, lengths); ties go to the lower class index."""
    act = model.activations(grid)
    return act.predicted, act.lengths


def prediction_accuracy(cp) -> float:
    """Mean of a 0/1 correctness vector."""
    cp = np.asarray(cp, dtype=np.float64).ravel()
    if cp.size == 0:
        raise EmptyVector("correctness vector is empty")
    if not np.all((cp == 0) | (cp == 1)):
        raise ValueError("correctness entries must be 0 or 1")
    return float(cp.sum() / cp.size)


def balanced_accuracy(labels, predictions, n_classes: int) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    recalls = [
        float(np.mean(predictions[labels == k] == k)) for k in range(n_classes) if np.any(labels == k)
    ]
    return float(np.mean(recalls)) if recalls else float("nan")


@dataclass
class Evaluation:
    accuracy: float
    loss: float
    correct: np.ndarray
    predictions: list[int]
    labels: list[int]
    balanced_accuracy: float

    def as_dict(self, class_names=None) -> dict:
        n = max(self.labels + self.predictions, default=-1) + 1
        names = list(class_names) if class_names else [str(k) for k in range(n)]
        n = len(names)
        confusion = [[0] * n for _ in range(n)]
        for y, p in zip(self.labels, self.predictions):
            confusion[y][p] += 1
        return {
            "n_samples": len(self.labels),
            "prediction_accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "mean_loss": self.loss,
            "class_names": names,
            "confusion": confusion,
        }


def evaluate(model: CapsNet, samples: Sequence[LabeledSample], loss: str | None = None) -> Evaluation:
    preds, losses = [], []
    for s in samples:
        _, lengths = model.forward(s.data)
        losses.append(float(compute_loss(loss or model.loss, lengths, s.label).data))
        preds.append(int(np.argmax(lengths.data)))
    labels = [s.label for s in samples]
    correct = (np.array(preds) == np.array(labels)).astype(np.int64)
    return Evaluation(
        accuracy=prediction_accuracy(correct),
        loss=float(np.mean(losses)),
        correct=correct,
        predictions=preds,
        labels=labels,
        balanced_accuracy=balanced_accuracy(labels, preds, model.hp.n_classes),
    )


# -- training ------------------------------------------------------------------


def train(
    model: CapsNet,
    train_set: Sequence[LabeledSample],
    val_set: Sequence[LabeledSample],
    epochs: int = 20,
    optimizer: RMSProp | None = None,
    seed: int = 0,
    loss: str | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Batch-size-1 RMSProp training; keeps the best-validation weights.

    Each epoch shuffles the training set, takes one optimizer step per
    sample, then evaluates both splits. The model ends holding the best
    checkpoint (ties favour the earlier epoch).
    """
    if not train_set or not val_set:
        raise TooFewSamples("training and validation sets must be non-empty")
    optimizer = optimizer or RMSProp()
    loss = loss or model.loss
    rng = np.random.default_rng(seed)
    records = []
    best_epoch, best_acc, best_state = 0, -1.0, model.state_dict()
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        for i in rng.permutation(len(train_set)):
            s = train_set[i]
            value, grads = model.loss_and_grads(s.data, s.label, loss)
            if not math.isfinite(value):
                raise DivergedLoss(epoch, value)
            optimizer.step(model.params, grads)
        tr = evaluate(model, train_set, loss)
        va = evaluate(model, val_set, loss)
        if not (math.isfinite(tr.loss) and math.isfinite(va.loss)):
            raise DivergedLoss(epoch, tr.loss if not math.isfinite(tr.loss) else va.loss)
        rec = EpochRecord(epoch, tr.accuracy, tr.loss, va.accuracy, va.loss, time.perf_counter() - start)
        records.append(rec)
        log.info(
            "epoch %d: train acc %.3f loss %.4f | val acc %.3f loss %.4f",
            epoch, rec.train_acc, rec.train_loss, rec.val_acc, rec.val_loss,
        )
        if on_epoch is not None:
            on_epoch(rec)
        if va.accuracy > best_acc:
            best_epoch, best_acc, best_state = epoch, va.accuracy, model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(records, best_epoch, copy.deepcopy(best_state))


# -- metrics CSV ---------------------------------------------------------------


def metrics_csv(records: Sequence[EpochRecord], include_time: bool = True) -> str:
    """CSV text; with include_time=False the seconds column is left blank so
    the file is byte-reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        w.writerow([
            r.epoch,
            f"{r.train_acc:.6f}", f"{r.train_loss:.8g}",
            f"{r.val_acc:.6f}", f"{r.val_loss:.8g}",
            f"{r.seconds:.3f}" if include_time else "",
        ])
    return buf.getvalue()


def read_metrics_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(METRICS_COLUMNS) - set(rows[0] if rows else METRICS_COLUMNS)
    if missing:
        raise ValueError(f"metrics CSV lacks columns {sorted(missing)}")
    return [
        EpochRecord(
            int(r["epoch"]), float(r["train_acc"]), float(r["train_loss"]),
            float(r["val_acc"]), float(r["val_loss"]),
            float(r["seconds"]) if r["seconds"] else float("nan"),
        )
        for r in rows
    ]
