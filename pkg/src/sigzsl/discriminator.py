"""Two-step known/unknown discrimination in the semantic space.

Step 1 compares a semantic vector with every known-class center; if the
nearest one is closer than ``theta1`` the sample is known. Otherwise step 2
compares it with the centers of the unknown classes discovered so far and
either joins the nearest one (distance at most ``theta2``) or opens a new
unknown label. Unknown centers are kept equal to the mean of their members.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


class MetricKind(str, enum.Enum):
    MAHALANOBIS = "mahalanobis"  # A = Sigma
    EUCLIDEAN = "euclidean"  # A = E
    DIAGONAL = "diagonal"  # A = diag(Sigma)
    SCALED_IDENTITY = "scaled_identity"  # A = trace(Sigma) / t * E


def _shrunk_covariance(x: np.ndarray, shrinkage: float) -> np.ndarray:
    """Sample covariance plus ``shrinkage * mean eigenvalue`` on the diagonal.

    Falls back to the identity for a single sample or a zero-spread set.
    """
    t = x.shape[1]
    if len(x) < 2:
        return np.eye(t)
    cov = np.cov(x, rowvar=False).reshape(t, t)
    tr = np.trace(cov)
    if tr <= 0:
        return np.eye(t)
    return cov + shrinkage * (tr / t) * np.eye(t)


def metric_matrix(cov: np.ndarray, metric: MetricKind) -> np.ndarray:
    t = len(cov)
    metric = MetricKind(metric)
    if metric is MetricKind.MAHALANOBIS:
        return cov
    if metric is MetricKind.DIAGONAL:
        return np.diag(np.diag(cov))
    if metric is MetricKind.SCALED_IDENTITY:
        return (np.trace(cov) / t) * np.eye(t)
    return np.eye(t)


def _whitener(a: np.ndarray) -> np.ndarray:
    """W with ``||W v||^2 = v.T A^-1 v``."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise ValueError("metric matrix is not positive definite; enable covariance shrinkage") from e
    return np.linalg.inv(chol)


@dataclass
class ClassStats:
    """Center, covariance and sample count of every known class."""

    centers: np.ndarray  # (K, t)
    covariances: np.ndarray  # (K, t, t)
    counts: np.ndarray  # (K,)
    _whiteners: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k, t = self.centers.shape
        if self.covariances.shape != (k, t, t) or self.counts.shape != (k,):
            raise ShapeError("centers, covariances and counts disagree on class count or dimension")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.centers)

    @property
    def diagonals(self) -> np.ndarray:
        return np.diagonal(self.covariances, axis1=1, axis2=2)

    @property
    def sigma2(self) -> np.ndarray:
        return np.trace(self.covariances, axis1=1, axis2=2) / self.dim

    def whitener(self, k: int, metric: MetricKind) -> np.ndarray:
        key = (k, MetricKind(metric))
        if key not in self._whiteners:
            self._whiteners[key] = _whitener(metric_matrix(self.covariances[k], metric))
        return self._whiteners[key]

    def copy(self) -> "ClassStats":
        return ClassStats(self.centers.copy(), self.covariances.copy(), self.counts.copy())


def fit_statistics(features: np.ndarray, labels, n_classes: int | None = None, shrinkage: float = 1e-3) -> ClassStats:
    """Per-class means and shrunk covariances of training features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError("features must be (n, t) with one label per row")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    t = features.shape[1]
    centers = np.zeros((k, t))
    covs = np.zeros((k, t, t))
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        members = features[labels == j]
        if not len(members):
            raise ValueError(f"class {j} has no training features")
        centers[j] = members.mean(axis=0)
        covs[j] = _shrunk_covariance(members, shrinkage)
    return ClassStats(centers, covs, counts)


def distance(z: np.ndarray, stats: ClassStats, k: int, metric: MetricKind = MetricKind.MAHALANOBIS) -> float:
    """Generalized distance ``sqrt((z - S_k).T A_k^-1 (z - S_k))``."""
    v = np.asarray(z, dtype=np.float64) - stats.centers[k]
    return float(np.linalg.norm(stats.whitener(k, metric) @ v))


def distances(z: np.ndarray, stats: ClassStats, metric: MetricKind = MetricKind.MAHALANOBIS) -> np.ndarray:
    """Distances of every row of ``z`` to every known center, shape (n, K)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != stats.dim:
        raise ShapeError(f"semantic dim {z.shape[1]} != stats dim {stats.dim}")
    out = np.empty((len(z), stats.n_classes))
    for k in range(stats.n_classes):
        out[:, k] = np.linalg.norm((z - stats.centers[k]) @ stats.whitener(k, metric).T, axis=1)
    return out


def theta1(lambda1: float, t: int) -> float:
    return lambda1 * 3.0 * np.sqrt(t)


def theta2(theta_1: float, lambda2: float, d1: float) -> float:
    return (theta_1 + lambda2 * d1) / (1.0 + lambda2)


@dataclass
class DiscriminatorConfig:
    lambda1: float = 0.4
    lambda2: float = 1.0
    metric: MetricKind = MetricKind.MAHALANOBIS
    update_known: bool = False
    shrinkage: float = 1e-3
    unknown_covariance: bool = False  # identity metric for unknowns unless set

    def __post_init__(self):
        self.metric = MetricKind(self.metric)
        if self.lambda1 <= 0 or self.lambda2 < 0:
            raise ValueError("need lambda1 > 0 and lambda2 >= 0")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1, "lambda2": self.lambda2, "metric": self.metric.value,
            "update_known": self.update_known, "shrinkage": self.shrinkage,
            "unknown_covariance": self.unknown_covariance,
        }


@dataclass
class UnknownRegistry:
    """Discovered unknown labels R_1..R_n with their members and mean centers."""

    members: list[list[np.ndarray]] = field(default_factory=list)
    sums: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def labels(self) -> list[str]:
        return [f"R{u + 1}" for u in range(len(self))]

    @property
    def counts(self) -> list[int]:
        return [len(g) for g in self.members]

    def center(self, u: int) -> np.ndarray:
        return self.sums[u] / len(self.members[u])

    @property
    def centers(self) -> np.ndarray:
        return np.array([self.center(u) for u in range(len(self))])

    def add_label(self, z: np.ndarray) -> int:
        z = np.asarray(z, dtype=np.float64)
        self.members.append([z.copy()])
        self.sums.append(z.copy())
        return len(self) - 1

    def copy(self) -> "UnknownRegistry":
        return UnknownRegistry([list(g) for g in self.members], [s.copy() for s in self.sums])

    def snapshot(self) -> dict:
        return {
            "labels": self.labels,
            "counts": self.counts,
            "centers": [c.tolist() for c in self.centers],
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), indent=1)


def registry_update(registry: UnknownRegistry, label: int, z: np.ndarray) -> UnknownRegistry:
    """Add ``z`` to ``G_label``; the center becomes the mean of the members."""
    if not 0 <= label < len(registry):
        raise KeyError(f"no unknown label with index {label}")
    z = np.asarray(z, dtype=np.float64)
    registry.members[label].append(z.copy())
    registry.sums[label] += z
    return registry


def unknown_metric_matrix(
    registry: UnknownRegistry, label: int, metric: MetricKind, shrinkage: float = 1e-3
) -> np.ndarray:
    """Identity until ``#G >= t + 1``, then the metric built from G's covariance."""
    if not 0 <= label < len(registry):
        raise KeyError(f"no unknown label with index {label}")
    members = np.array(registry.members[label])
    t = members.shape[1]
    if len(members) < t + 1:
        return np.eye(t)
    return metric_matrix(_shrunk_covariance(members, shrinkage), metric)


@dataclass
class Prediction:
    known: bool
    index: int  # known class index, or unknown registry index (-1: unassigned in frozen mode)
    d1: float
    theta1: float
    d2: float | None = None
    theta2: float | None = None

    @property
    def tag(self) -> str:
        if self.known:
            return f"K{self.index}"
        return f"R{self.index + 1}" if self.index >= 0 else "R?"


def _unknown_distances(z: np.ndarray, registry: UnknownRegistry, config: DiscriminatorConfig) -> np.ndarray:
    v = registry.centers - z
    if not config.unknown_covariance:
        return np.linalg.norm(v, axis=1)
    out = np.empty(len(registry))
    for u in range(len(registry)):
        a = unknown_metric_matrix(registry, u, config.metric, config.shrinkage)
        out[u] = np.linalg.norm(_whitener(a) @ v[u])
    return out


def _decide(z, d_known, stats, registry, config) -> Prediction:
    th1 = theta1(config.lambda1, stats.dim)
    k = int(np.argmin(d_known))  # first minimum: lowest index wins ties
    d1 = float(d_known[k])
    if d1 < th1:
        if config.update_known:
            n = stats.counts[k]
            stats.centers[k] = (n * stats.centers[k] + z) / (n + 1)
            stats.counts[k] = n + 1
        return Prediction(True, k, d1, th1)
    if len(registry) == 0:
        return Prediction(False, registry.add_label(z), d1, th1)
    d_unknown = _unknown_distances(z, registry, config)
    u = int(np.argmin(d_unknown))
    d2 = float(d_unknown[u])
    th2 = theta2(th1, config.lambda2, d1)
    if d2 > th2:
        return Prediction(False, registry.add_label(z), d1, th1, d2, th2)
    registry_update(registry, u, z)
    return Prediction(False, u, d1, th1, d2, th2)


def discriminate(z: np.ndarray, stats: ClassStats, registry: UnknownRegistry, config: DiscriminatorConfig) -> Prediction:
    """One online step; mutates ``registry`` (and ``stats`` if update_known)."""
    z = np.asarray(z, dtype=np.float64)
    return _decide(z, distances(z, stats, config.metric)[0], stats, registry, config)


class Discriminator:
    """Owns a private copy of the known statistics and the session registry."""

    def __init__(self, stats: ClassStats, config: DiscriminatorConfig | None = None):
        self.config = config or DiscriminatorConfig()
        self.stats = stats.copy()
        self.registry = UnknownRegistry()

    def run(self, z: np.ndarray, d_known: np.ndarray | None = None) -> list[Prediction]:
        """Stream the rows of ``z`` in order.

        ``d_known`` may carry precomputed known-class distances; they are only
        valid while the known centers stay fixed, so it is ignored when
        ``update_known`` is set.
        """
        z = np.asarray(z, dtype=np.float64)
        if d_known is None and not self.config.update_known:
            d_known = distances(z, self.stats, self.config.metric)
        out = []
        for i, zi in enumerate(z):
            row = distances(zi, self.stats, self.config.metric)[0] if self.config.update_known else d_known[i]
            out.append(_decide(zi, row, self.stats, self.registry, self.config))
        return out

    def predict_frozen(self, z: np.ndarray) -> list[Prediction]:
        """Evaluate every row against the current state without mutating it.

        Rows rejected by step 1 that are farther than ``theta2`` from every
        registered unknown center get index -1.
        """
        z = np.asarray(z, dtype=np.float64)
        d_known = distances(z, self.stats, self.config.metric)
        th1 = theta1(self.config.lambda1, self.stats.dim)
        out = []
        for zi, row in zip(z, d_known):
            k = int(np.argmin(row))
            d1 = float(row[k])
            if d1 < th1:
                out.append(Prediction(True, k, d1, th1))
                continue
            if not len(self.registry):
                out.append(Prediction(False, -1, d1, th1))
                continue
            du = _unknown_distances(zi, self.registry, self.config)
            u = int(np.argmin(du))
            th2 = theta2(th1, self.config.lambda2, d1)
            out.append(Prediction(False, u if du[u] <= th2 else -1, d1, th1, float(du[u]), th2))
        return out
