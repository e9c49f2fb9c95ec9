"""Cross-entropy, center and reconstruction losses and the center-table rule."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_ct: float = 0.1
    lambda_r: float = 1.0
    ce_on: bool = True
    ct_on: bool = True
    r_on: bool = True

    def __post_init__(self):
        if self.lambda_ct < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchLoss:
    ce: float
    ct: float
    r: float
    total: float


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside the known set 0..{n_classes - 1}")
    return labels.astype(np.intp)


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    labels = _check_labels(labels, probs.shape[1])
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4):
        raise ValueError("probability rows must sum to 1")
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, LOG_FLOOR))))


def cross_entropy_logit_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits))`` with respect to the logits."""
    labels = _check_labels(labels, probs.shape[1])
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


@dataclass
class CenterTable:
    """One center per known class (rows of ``centers``) and the rate ``alpha``."""

    centers: np.ndarray
    alpha: float = 0.5

    @classmethod
    def zeros(cls, n_classes: int, dim: int, alpha: float = 0.5, dtype=np.float32) -> "CenterTable":
        return cls(np.zeros((n_classes, dim), dtype=dtype), alpha)

    def update(self, features: np.ndarray, labels, classic: bool = False) -> np.ndarray:
        delta = center_delta(features, labels, self, classic=classic)
        self.centers -= (self.alpha * delta).astype(self.centers.dtype)
        return delta


def _centers_of(table) -> np.ndarray:
    return table.centers if isinstance(table, CenterTable) else np.asarray(table)


def center_loss(features: np.ndarray, labels, table) -> float:
    centers = _centers_of(table)
    if features.shape[1] != centers.shape[1]:
        raise ShapeError(f"feature dim {features.shape[1]} != center dim {centers.shape[1]}")
    if np.asarray(labels).size and np.max(labels) >= len(centers):
        raise KeyError(f"no center for label {int(np.max(labels))}")
    labels = _check_labels(labels, len(centers))
    diff = features - centers[labels]
    return float(np.sum(diff * diff) / (2 * len(labels)))


def center_loss_grad(features: np.ndarray, labels, table) -> np.ndarray:
    centers = _centers_of(table)
    labels = _check_labels(labels, len(centers))
    return (features - centers[labels]) / len(labels)


def center_delta(features: np.ndarray, labels, table, classic: bool = False) -> np.ndarray:
    """Per-class center step ``sum_{i: y_i=j} (c_j - z_i) / n_j`` (zero if absent).

    ``classic=True`` uses the ``1 + n_j`` denominator of the original
    center-loss formulation.
    """
    centers = _centers_of(table)
    labels = _check_labels(labels, len(centers))
    k = len(centers)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros(centers.shape, dtype=np.float64)
    np.add.at(sums, labels, features)
    delta = counts[:, None] * centers - sums
    denom = counts + (1.0 if classic else 0.0)
    present = counts > 0
    delta[present] /= denom[present, None]
    delta[~present] = 0.0
    return delta


def reconstruction_loss(reconstructions: np.ndarray, originals: np.ndarray) -> float:
    """``sum ||x~ - x||^2 / 2N`` with the batch on the first axis."""
    if reconstructions.shape != originals.shape:
        raise ShapeError(f"shape mismatch {reconstructions.shape} vs {originals.shape}")
    diff = reconstructions - originals
    return float(np.sum(diff * diff) / (2 * len(originals)))


def reconstruction_loss_grad(reconstructions: np.ndarray, originals: np.ndarray) -> np.ndarray:
    return (reconstructions - originals) / len(originals)


def total_loss(ce: float, ct: float, r: float, weights: LossWeights) -> float:
    return (
        (ce if weights.ce_on else 0.0)
        + (weights.lambda_ct * ct if weights.ct_on else 0.0)
        + (weights.lambda_r * r if weights.r_on else 0.0)
    )
