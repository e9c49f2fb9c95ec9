"""Batched training of F, C, D and the center table, plus accuracy evaluation.

Within every batch the order is fixed: features are computed, the center
table is moved toward the batch means, the three losses are evaluated against
the updated centers, and Adam then updates F, C and D in that order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import discriminator as disc
from . import losses, network as net, nn
from .errors import NonFiniteError

GROUPS = ("F", "C", "D")


@dataclass
class TrainConfig:
    batch_size: int = 256
    eta: float = 1e-3
    alpha: float = 0.5
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    max_epochs: int = 250
    patience: int = 25
    seed: int = 0
    classic_center_update: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        if self.batch_size < 1 or self.eta <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("need batch_size >= 1, eta > 0, max_epochs >= 1 and patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    ce: float
    ct: float
    r: float
    total: float


Hook = Callable[[str, dict], None]


def new_adam_states(params: net.ModelParams) -> dict[str, nn.AdamState]:
    return {g: nn.AdamState.zeros_like([params.tensors[k] for k in params.group(g)]) for g in GROUPS}


def _emit(hooks, event, **info):
    for h in hooks or ():
        h(event, info)


def train_step(params, x, y, config: TrainConfig, adam_states, hooks=None) -> losses.BatchLoss:
    w = config.weights
    fw = net.forward(params, x, with_decoder=w.r_on)
    table = losses.CenterTable(params.centers, config.alpha)
    if w.ct_on:
        table.update(fw.z, y, classic=config.classic_center_update)
        _emit(hooks, "center_update", centers=params.centers)
    ce = losses.cross_entropy(fw.probs, y)
    ct = losses.center_loss(fw.z, y, table)
    r = losses.reconstruction_loss(fw.recon, x) if w.r_on else math.nan
    total = losses.total_loss(ce, ct, 0.0 if math.isnan(r) else r, w)
    batch = losses.BatchLoss(ce, ct, r, total)
    _emit(hooks, "loss", loss=batch)
    if not all(math.isfinite(v) for v in (ce, ct, total)):
        raise NonFiniteError(f"non-finite loss {batch}")
    dt = params.dtype
    dl = losses.cross_entropy_logit_grad(fw.probs, y).astype(dt) if w.ce_on else None
    dz = (w.lambda_ct * losses.center_loss_grad(fw.z, y, table)).astype(dt) if w.ct_on else None
    dr = (w.lambda_r * losses.reconstruction_loss_grad(fw.recon, x)).astype(dt) if w.r_on else None
    grads = net.backward(params, fw, dl, dz, dr)
    for g in GROUPS:
        keys = params.group(g)
        nn.adam_step([params.tensors[k] for k in keys], [grads[k] for k in keys], adam_states[g], config.eta)
        _emit(hooks, f"adam_{g}", step=adam_states[g].step)
    return batch


def batch_order(n: int, config: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle split into full batches; the partial tail is dropped."""
    perm = nn.child_rng(config.seed, 1, epoch).permutation(n)
    n_batches = n // config.batch_size
    return [perm[i * config.batch_size : (i + 1) * config.batch_size] for i in range(n_batches)]


def train_epoch(params, frames, labels, config: TrainConfig, adam_states, epoch: int = 0, hooks=None) -> EpochStats:
    batches = batch_order(len(frames), config, epoch)
    if not batches:
        raise ValueError(f"{len(frames)} training frames do not fill one batch of {config.batch_size}")
    sums = np.zeros(4)
    for b, idx in enumerate(batches):
        try:
            bl = train_step(params, frames[idx], labels[idx], config, adam_states, hooks)
        except NonFiniteError as e:
            raise NonFiniteError(f"epoch {epoch}, batch {b}: {e}") from e
        sums += (bl.ce, bl.ct, bl.r, bl.total)
    return EpochStats(*(sums / len(batches)).tolist())


@dataclass
class Accuracy:
    per_class: np.ndarray  # nan where a class has no samples
    mean: float  # macro average over classes that appear
    overall: float

    def to_dict(self) -> dict:
        return {"per_class": [None if math.isnan(v) else v for v in self.per_class.tolist()],
                "mean": self.mean, "overall": self.overall}


def accuracy(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> Accuracy:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("labels outside the known class set")
    hit = pred == labels
    total = np.bincount(labels, minlength=n_classes)
    correct = np.bincount(labels, weights=hit, minlength=n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    present = total > 0
    return Accuracy(per, float(per[present].mean()) if present.any() else math.nan,
                    float(hit.mean()) if hit.size else math.nan)


def evaluate_softmax(params, frames, labels) -> Accuracy:
    probs = net.predict_proba(params, frames)
    return accuracy(np.argmax(probs, axis=1), labels, params.config.n_classes)


def fit_class_stats(params, frames, labels, shrinkage: float = 1e-3) -> disc.ClassStats:
    return disc.fit_statistics(net.embed(params, frames), labels, params.config.n_classes, shrinkage)


def evaluate_cluster(params, frames, labels, stats: disc.ClassStats | None,
                     metric: disc.MetricKind = disc.MetricKind.MAHALANOBIS) -> Accuracy:
    """Nearest-center accuracy (no rejection step)."""
    if stats is None:
        raise ValueError("cluster evaluation needs fitted class statistics")
    d = disc.distances(net.embed(params, frames), stats, metric)
    return accuracy(np.argmin(d, axis=1), labels, stats.n_classes)


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    ct: float
    r: float
    total: float
    val_softmax_acc: float
    best_val_acc: float


@dataclass
class FitResult:
    params: net.ModelParams  # best-validation parameters
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    stopped_early: bool


HISTORY_FIELDS = ["epoch", "ce", "ct", "r", "total", "val_softmax_acc", "best_val_acc"]


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch] + [repr(float(getattr(rec, k))) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        return [
            EpochRecord(int(r["epoch"]), *(float(r[k]) for k in HISTORY_FIELDS[1:]))
            for r in csv.DictReader(f)
        ]


def fit(params, train, val, config: TrainConfig, hooks=None, on_epoch=None) -> FitResult:
    """Train until ``max_epochs`` or ``patience`` epochs without a new best
    validation softmax accuracy; returns the best-validation parameters.

    ``train`` and ``val`` are ``(frames, labels)`` pairs with labels in
    ``0..n_classes-1``; ``params`` is updated in place.
    """
    (xtr, ytr), (xva, yva) = train, val
    if not len(xtr) or not len(xva):
        raise ValueError("training and validation sets must be non-empty")
    xtr = np.asarray(xtr, dtype=params.dtype)
    xva = np.asarray(xva, dtype=params.dtype)
    states = new_adam_states(params)
    history, best, best_acc, best_epoch, stale = [], params.copy(), -1.0, -1, 0
    for epoch in range(config.max_epochs):
        stats = train_epoch(params, xtr, ytr, config, states, epoch, hooks)
        acc = evaluate_softmax(params, xva, yva).mean
        if acc > best_acc:
            best, best_acc, best_epoch, stale = params.copy(), acc, epoch, 0
        else:
            stale += 1
        history.append(EpochRecord(epoch, stats.ce, stats.ct, stats.r, stats.total, acc, best_acc))
        if on_epoch is not None:
            on_epoch(history[-1])
        if stale >= config.patience:
            break
    stopped = len(history) < config.max_epochs
    return FitResult(best, history, best_epoch, best_acc, stopped)
