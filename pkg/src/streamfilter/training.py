"""Mini-batch training with Adam and step-decayed learning rate.

Validation runs after every epoch; the parameters with the best validation
accuracy (ties: lower validation loss) are kept as the returned model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import relabel_inclusive
from .evaluation import MetricsReport, confusion_metrics, metrics_csv
from .geometry import Tractogram, resample
from .models import Model, ModelSpec, build
from .rng import Rng
from .tensor import Adam, lr_schedule, softmax_cross_entropy

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    spec: ModelSpec = field(default_factory=ModelSpec)
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-3
    lr_factor: float = 0.7
    lr_every: int = 90
    lr_floor: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    resample_to: int = 16
    report_every: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.resample_to < 2:
            raise ValueError("resample_to must be >= 2")

    def lr_at(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr, self.lr_factor, self.lr_every, self.lr_floor)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        return metrics_csv(self.rows, LOG_FIELDS)

    def __len__(self):
        return len(self.rows)


@dataclass
class TrainResult:
    model: Model  # best-validation parameters
    final: Model  # parameters after the last epoch
    log: TrainLog
    best_epoch: int
    train_idx: np.ndarray
    val_idx: np.ndarray


def prepare(t: Tractogram, resample_to: int) -> np.ndarray:
    return np.stack([resample(s, resample_to) for s in t.streamlines])


def split_indices(n: int, fraction: float, rng: Rng):
    """Random partition of range(n) into (rest, held) with len(held) = round(fraction * n)."""
    perm = rng.permutation(n)
    k = min(max(int(round(fraction * n)), 1), n - 1)
    return np.sort(perm[k:]), np.sort(perm[:k])


def evaluate_arrays(model: Model, x, y, chunk: int = 512):
    """(mean loss, accuracy, predicted labels) over pre-resampled arrays."""
    logits = np.concatenate([model.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    loss, _ = softmax_cross_entropy(logits, y)
    pred = np.argmax(logits, axis=1)
    return loss, float(np.mean(pred == y)), pred


def _check_classes(y, what):
    if len(np.unique(y)) < 2:
        raise ValueError(f"{what} contains a single class; need both plausible and non-plausible")


def train(config: TrainConfig, data: Tractogram, val: Tractogram | None = None,
          on_epoch=None) -> TrainResult:
    """Train from scratch on ``data``.

    Without ``val`` a random ``val_fraction`` of ``data`` is held out for
    validation. ``on_epoch(row)`` is called after every epoch.
    """
    if data.labels is None:
        raise ValueError("training data has no labels")
    root = Rng(config.seed)
    if val is None:
        tr_idx, va_idx = split_indices(len(data), config.val_fraction, root.spawn(1))
        train_t, val_t = data.subset(tr_idx), data.subset(va_idx)
    else:
        if val.labels is None:
            raise ValueError("validation data has no labels")
        tr_idx, va_idx = np.arange(len(data)), np.arange(0)
        train_t, val_t = data, val
    _check_classes(train_t.labels, "training split")

    x_tr = prepare(train_t, config.resample_to)
    y_tr = train_t.labels
    x_va = prepare(val_t, config.resample_to)
    y_va = val_t.labels

    model = build(config.spec)
    best = model.clone(np.float64)  # private copy of the parameters
    opt = Adam(model.parameters(), config.beta1, config.beta2, config.eps)
    shuffler = root.spawn(2)
    logbook = TrainLog()
    best_key = (-1.0, -math.inf)
    best_epoch = -1
    n = len(x_tr)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = shuffler.permutation(n)
        tot_loss = 0.0
        correct = 0
        for b0 in range(0, n, config.batch):
            idx = perm[b0:b0 + config.batch]
            logits = model.forward(x_tr[idx])
            loss, grad = softmax_cross_entropy(logits, y_tr[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // config.batch} "
                    f"(lr={lr}, max |logit|={np.max(np.abs(logits))})")
            model.backward(grad)
            opt.step(lr)
            tot_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y_tr[idx]))
        row = dict(epoch=epoch, lr=lr, train_loss=tot_loss / n, train_acc=correct / n)
        if len(x_va):
            vl, va, _ = evaluate_arrays(model, x_va, y_va)
        else:
            vl, va = row["train_loss"], row["train_acc"]
        row.update(val_loss=float(vl), val_acc=va)
        logbook.append(**row)
        if (va, -vl) > best_key:
            best_key = (va, -vl)
            best_epoch = epoch
            best.copy_params_from(model)
        if on_epoch is not None:
            on_epoch(row)
        if config.report_every and epoch % config.report_every == 0:
            log.info("epoch %d lr %.2e loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                     epoch, lr, row["train_loss"], row["train_acc"], vl, va)
    if best_epoch < 0:
        best.copy_params_from(model)
    return TrainResult(best, model, logbook, best_epoch, tr_idx, va_idx)


def evaluate(model: Model, t: Tractogram, resample_to: int = 16) -> MetricsReport:
    _, _, pred = evaluate_arrays(model, prepare(t, resample_to), t.labels)
    return confusion_metrics(pred, t.labels)


# ----------------------------------------------------------------------


@dataclass
class CVResult:
    reports: list
    mean: dict
    std: dict

    def to_csv(self) -> str:
        fields = ("fold", "n", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "dsc")
        rows = []
        for i, r in enumerate(self.reports):
            row = r.as_row()
            row["fold"] = i
            rows.append(row)
        for tag, d in (("mean", self.mean), ("std", self.std)):
            rows.append({"fold": tag, **d})
        return metrics_csv(rows, fields)


def summarize(reports) -> tuple[dict, dict]:
    keys = ("accuracy", "precision", "recall", "dsc")
    vals = {k: np.array([getattr(r, k) for r in reports]) for k in keys}
    return ({k: float(v.mean()) for k, v in vals.items()},
            {k: float(v.std()) for k, v in vals.items()})


def split_folds(t: Tractogram, n_folds: int, seed: int = 0) -> list:
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if len(t) < n_folds:
        raise ValueError("fewer streamlines than folds")
    perm = Rng(seed).permutation(len(t))
    return [t.subset(np.sort(part)) for part in np.array_split(perm, n_folds)]


def cross_validate(config: TrainConfig, folds: list) -> CVResult:
    """Hold out each fold once; the rest is split into train and validation
    by ``config.val_fraction``."""
    if len(folds) < 2:
        raise ValueError("need at least 2 folds")
    for i, f in enumerate(folds):
        if len(f) == 0:
            raise ValueError(f"fold {i} is empty")
    reports = []
    for i in range(len(folds)):
        rest = Tractogram.concat([f for j, f in enumerate(folds) if j != i])
        res = train(config, rest)
        reports.append(evaluate(res.model, folds[i], config.resample_to))
    mean, std = summarize(reports)
    return CVResult(reports, mean, std)


def incremental_train(config: TrainConfig, data: Tractogram, stages: list,
                      test_fraction: float = 0.2) -> list:
    """Retrain from scratch for each inclusive label stage.

    Every stage uses the same train/test partition and hyperparameters; only
    the labels change. Returns ``[(stage, MetricsReport), ...]``.
    """
    if data.class_ids is None:
        raise ValueError("incremental training needs class ids")
    stages = [frozenset(int(c) for c in s) for s in stages]
    if not stages:
        raise ValueError("no stages given")
    for a, b in zip(stages[:-1], stages[1:]):
        if not a <= b:
            raise ValueError(f"stages must grow monotonically: {sorted(a)} then {sorted(b)}")
    tr_idx, te_idx = split_indices(len(data), test_fraction, Rng(config.seed).spawn(3))
    out = []
    for stage in stages:
        labels = relabel_inclusive(data.class_ids, stage)
        _check_classes(labels[tr_idx], f"stage {sorted(stage)}")
        relabeled = Tractogram(data.streamlines, labels, data.class_ids)
        res = train(config, relabeled.subset(tr_idx))
        out.append((sorted(stage), evaluate(res.model, relabeled.subset(te_idx),
                                            config.resample_to)))
    return out
