"""End-to-end glue shared by the command line, the scripts and the tests:
split a corpus, train on the known classes, fit semantic statistics and run
the online discriminator over a shuffled mix of known and unknown test frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import discriminator as disc
from . import losses, metrics, network as net, trainer
from .nn import child_rng

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))

# Unit-power frames put the reconstruction term near 60 at initialization
# against ~2.2 for cross-entropy; desk runs shrink its weight accordingly.
DESK_WEIGHTS = losses.LossWeights(lambda_r=0.01)

# reduced network for desk-scale runs on a laptop CPU
DESK_ARCH = net.ArchConfig(
    conv_layers=(
        net.ConvLayer(16, (1, 3), (0, 1), pool="max"),
        net.ConvLayer(16, (2, 3), (0, 1)),
        net.ConvLayer(16, (1, 3), (0, 1), pool="max"),
        net.ConvLayer(16, (1, 3), (0, 1)),
    ),
    dense_widths=(128,),
    semantic_dim=8,
    classifier_widths=(64,),
)

ARCH_PRESETS = {"default": net.ArchConfig(), "desk": DESK_ARCH}


def arch_for(preset: str, known_names) -> net.ArchConfig:
    base = ARCH_PRESETS[preset].to_dict()
    base.update(n_classes=len(known_names), class_names=list(known_names))
    return net.ArchConfig.from_dict(base)


def resolve_classes(corpus: ds.Corpus, unknown_names) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Corpus ids of (known, unknown) classes; raises KeyError on a bad name."""
    unknown = tuple(sorted(corpus.class_index(n) for n in unknown_names))
    known = tuple(c for c in range(len(corpus.class_names)) if c not in unknown)
    return known, unknown


def train_known(params, split: ds.Split, config: trainer.TrainConfig, **kw) -> trainer.FitResult:
    tr, va = split.train, split.val_known
    return trainer.fit(
        params,
        (tr.frames, ds.relabel(tr.labels, split.known)),
        (va.frames, ds.relabel(va.labels, split.known)),
        config,
        **kw,
    )


def known_statistics(params, split: ds.Split, shrinkage: float = 1e-3) -> disc.ClassStats:
    """Semantic centers and covariances of the known training frames."""
    tr = split.train
    return trainer.fit_class_stats(params, tr.frames, ds.relabel(tr.labels, split.known), shrinkage)


@dataclass
class MixedTestSet:
    z: np.ndarray  # semantic features in presentation order
    truth: np.ndarray  # corpus class ids in presentation order
    order: np.ndarray  # permutation applied to [test_known; test_unknown]


def mixed_test_set(params, split: ds.Split, seed: int) -> MixedTestSet:
    frames = np.concatenate([split.test_known.frames, split.test_unknown.frames])
    truth = np.concatenate([split.test_known.labels, split.test_unknown.labels])
    order = child_rng(seed, 2).permutation(len(truth))
    z = net.embed(params, frames[order].astype(params.dtype)).astype(np.float64)
    return MixedTestSet(z, truth[order], order)


def run_discriminator(stats, mixed: MixedTestSet, split: ds.Split, config: disc.DiscriminatorConfig,
                      class_names=None, d_known=None):
    """Stream the mixed test set once; returns (report, discriminator, predictions)."""
    d = disc.Discriminator(stats, config)
    preds = d.run(mixed.z, d_known)
    counts = metrics.tally(
        [p.known for p in preds], [p.index for p in preds], mixed.truth, split.known, split.unknown
    )
    return metrics.build_report(counts, config.lambda1, class_names), d, preds


def sweep(stats, mixed: MixedTestSet, split: ds.Split, base: disc.DiscriminatorConfig,
          grid=DEFAULT_GRID, class_names=None) -> list[metrics.ZslReport]:
    if len(grid) == 0:
        raise ValueError("empty lambda1 grid")
    d_known = None if base.update_known else disc.distances(mixed.z, stats, base.metric)
    out = []
    for lam in grid:
        cfg = disc.DiscriminatorConfig(**{**base.to_dict(), "lambda1": float(lam)})
        out.append(run_discriminator(stats, mixed, split, cfg, class_names, d_known)[0])
    return out


def interval_of(reports: list[metrics.ZslReport], threshold: float = 0.8):
    return metrics.discrimination_interval([(r.lambda1, r.wtr) for r in reports], threshold)


@dataclass
class DeskResult:
    corpus: ds.Corpus
    split: ds.Split
    fit: trainer.FitResult
    softmax: trainer.Accuracy
    cluster: trainer.Accuracy
    reports: list[metrics.ZslReport]
    interval: tuple[list[tuple[float, float]], float]

    def best(self) -> metrics.ZslReport:
        """Sweep row with the highest WTR (first one on ties)."""
        return max(self.reports, key=lambda r: -1.0 if r.wtr is None else r.wtr)


def desk_run(corpus: ds.Corpus, unknown=("CPFSK", "B-FM"), seed: int = 0, arch: str = "desk",
             weights: losses.LossWeights | None = None, max_epochs: int = 100,
             metric: disc.MetricKind = disc.MetricKind.MAHALANOBIS, on_epoch=None) -> DeskResult:
    """Split, train on the known classes, then sweep lambda1 on the mixed test set."""
    known, unk = resolve_classes(corpus, unknown)
    split = ds.split_dataset(corpus, ds.SplitSpec(unknown=unk, seed=seed))
    names = [corpus.class_names[c] for c in known]
    config = trainer.TrainConfig(max_epochs=max_epochs, seed=seed,
                                 weights=weights or losses.LossWeights(**DESK_WEIGHTS.to_dict()))
    fit = train_known(net.init_params(arch_for(arch, names), seed), split, config, on_epoch=on_epoch)
    stats = known_statistics(fit.params, split)
    tk = split.test_known
    y = ds.relabel(tk.labels, split.known)
    mixed = mixed_test_set(fit.params, split, seed)
    reports = sweep(stats, mixed, split, disc.DiscriminatorConfig(metric=metric), class_names=corpus.class_names)
    return DeskResult(
        corpus, split, fit,
        trainer.evaluate_softmax(fit.params, tk.frames, y),
        trainer.evaluate_cluster(fit.params, tk.frames, y, stats, metric),
        reports, interval_of(reports),
    )
