"""Command line: ``sigzsl {gen,train,eval,discriminate,sweep,replay}``.

Every command writes its outputs plus ``manifest.json`` into ``--out DIR``.
Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import discriminator as disc
from . import losses, metrics, network as net, pipeline as pl, synth, trainer
from .errors import DataMismatchError, FormatError, NonFiniteError

log = logging.getLogger("sigzsl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_fingerprint() -> str:
    """Hash of the package sources, so a manifest pins the exact code."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, args, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": args.command,
            "argv": list(argv),
            "config": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
            "seeds": {},
            "inputs": {},
            "outputs": {},
            "code": {"version": __version__, "sha256": code_fingerprint(), "python": platform.python_version(),
                     "numpy": np.__version__},
            "started": dt.datetime.now(dt.timezone.utc).isoformat(),
        }

    def path(self, name: str) -> Path:
        return self.out / name

    def read(self, path) -> Path:
        self.manifest["inputs"][str(path)] = _sha256(path)
        return Path(path)

    def wrote(self, name: str) -> None:
        self.manifest["outputs"][name] = {"path": str(self.path(name)), "sha256": _sha256(self.path(name))}

    def finish(self) -> None:
        self.manifest["finished"] = dt.datetime.now(dt.timezone.utc).isoformat()
        self.path("manifest.json").write_text(json.dumps(self.manifest, indent=1, default=str) + "\n")


def _write_json(run: Run, name: str, obj) -> None:
    run.path(name).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    run.wrote(name)


def _classes(text: str) -> list[synth.ModulationType]:
    if text == "all":
        return list(synth.ALL_TYPES)
    try:
        return [synth.ModulationType(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"{e}; choose from {[m.value for m in synth.ALL_TYPES]}") from None


def cmd_gen(args, run: Run) -> int:
    profile = synth.ChannelProfile(
        rayleigh_fading=not args.no_fading, max_clock_ppm=args.max_clock_ppm, awgn=not args.no_awgn
    )
    corpus = synth.generate_dataset(
        _classes(args.classes), args.frames_per_class, synth.parse_snr_grid(args.snr), args.seed, profile=profile
    )
    ds.write_sigds(corpus, run.path("corpus.sigds"))
    run.wrote("corpus.sigds")
    run.manifest["seeds"]["synthesis"] = args.seed
    run.manifest["dataset_sha256"] = corpus.digest()
    run.manifest["synthesis"] = {"frame": synth.FrameSpec().__dict__, "config": synth.SynthConfig().to_dict(),
                                 "channel": profile.to_dict()}
    print(f"{len(corpus)} frames, {len(corpus.class_names)} classes -> {run.path('corpus.sigds')}")
    return EXIT_OK


def _load_split(run: Run, data, unknown, split_seed, min_snr):
    corpus = ds.sieve_by_snr(ds.read_sigds(run.read(data)), min_snr)
    run.manifest["dataset_sha256"] = _sha256(data)
    known, unk = pl.resolve_classes(corpus, unknown)
    if not known:
        raise UsageError("every class is marked unknown")
    split = ds.split_dataset(corpus, ds.SplitSpec(unknown=unk, seed=split_seed))
    run.manifest["seeds"]["split"] = split_seed
    return corpus, split


def cmd_train(args, run: Run) -> int:
    corpus, split = _load_split(run, args.data, args.unknown, args.split_seed, args.min_snr)
    names = [corpus.class_names[c] for c in split.known]
    weights = losses.LossWeights(
        ce_on=not args.no_ce, ct_on=not args.no_ct, r_on=not args.no_r,
        lambda_ct=args.lambda_ct, lambda_r=args.lambda_r,
    )
    config = trainer.TrainConfig(
        batch_size=args.batch_size, eta=args.lr, alpha=args.alpha, weights=weights,
        max_epochs=args.epochs, patience=args.patience, seed=args.seed,
    )
    run.manifest["seeds"].update(init=args.seed, shuffle=args.seed)
    run.manifest["train_config"] = config.to_dict()
    params = net.init_params(pl.arch_for(args.arch, names), args.seed)
    fit = pl.train_known(params, split, config, on_epoch=lambda r: log.info(
        "epoch %d ce %.4f ct %.4f r %.4f val %.4f", r.epoch, r.ce, r.ct, r.r, r.val_softmax_acc))
    meta = {
        "dataset_sha256": run.manifest["dataset_sha256"],
        "split": {"seed": args.split_seed, "unknown": sorted(args.unknown), "min_snr": args.min_snr},
        "train": config.to_dict(),
        "best_epoch": fit.best_epoch,
        "best_val_acc": fit.best_val_acc,
    }
    net.save_checkpoint(fit.params, run.path("model.ckpt"), meta)
    trainer.write_history(fit.history, run.path("history.csv"))
    run.wrote("model.ckpt")
    run.wrote("history.csv")
    print(f"best epoch {fit.best_epoch}, val softmax accuracy {fit.best_val_acc:.4f} "
          f"({len(fit.history)} epochs{', stopped early' if fit.stopped_early else ''})")
    return EXIT_OK


def _load_model(run: Run, args):
    params, meta = net.load_checkpoint(run.read(args.model), with_meta=True)
    split_meta = meta.get("split", {})
    for key, default in (("unknown", []), ("split_seed", 0), ("min_snr", None)):
        if getattr(args, key) is None:
            setattr(args, key, split_meta.get("seed" if key == "split_seed" else key, default))
    corpus, split = _load_split(run, args.data, args.unknown, args.split_seed, args.min_snr)
    names = tuple(corpus.class_names[c] for c in split.known)
    if len(names) != params.config.n_classes:
        raise DataMismatchError(
            f"checkpoint was trained on {params.config.n_classes} known classes, "
            f"corpus leaves {len(names)} known: {list(names)}"
        )
    if params.config.class_names and names != params.config.class_names:
        raise DataMismatchError(f"known classes {list(names)} differ from checkpoint {list(params.config.class_names)}")
    if meta.get("dataset_sha256") not in (None, run.manifest["dataset_sha256"]):
        warnings.warn("corpus differs from the one the checkpoint was trained on", stacklevel=2)
    return params, corpus, split


def cmd_eval(args, run: Run) -> int:
    params, corpus, split = _load_model(run, args)
    names = [corpus.class_names[c] for c in split.known]
    stats = pl.known_statistics(params, split, args.shrinkage)
    tk = split.test_known
    y = ds.relabel(tk.labels, split.known)
    results = {
        "softmax": trainer.evaluate_softmax(params, tk.frames, y),
        "cluster": trainer.evaluate_cluster(params, tk.frames, y, stats, disc.MetricKind(args.metric)),
    }
    with open(run.path("accuracy.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "class", "accuracy"])
        for kind, acc in results.items():
            for name, v in zip(names, acc.per_class.tolist()):
                w.writerow([kind, name, metrics.UNDEFINED if np.isnan(v) else repr(v)])
            w.writerow([kind, "macro", repr(acc.mean)])
    run.wrote("accuracy.csv")
    _write_json(run, "accuracy.json", {
        k: {"classes": names, **v.to_dict()} for k, v in results.items()
    })
    for kind, acc in results.items():
        print(f"{kind:8s} macro {acc.mean:.4f} overall {acc.overall:.4f}")
    return EXIT_OK


def _disc_config(args, lambda1=None) -> disc.DiscriminatorConfig:
    return disc.DiscriminatorConfig(
        lambda1=args.lambda1 if lambda1 is None else lambda1, lambda2=args.lambda2, metric=args.metric,
        update_known=args.update_known, shrinkage=args.shrinkage, unknown_covariance=args.unknown_covariance,
    )


def _prepare_discrimination(args, run: Run):
    params, corpus, split = _load_model(run, args)
    if not split.unknown:
        warnings.warn("no unknown classes declared: running open-set rejection only", stacklevel=2)
    run.manifest["seeds"]["order"] = args.order_seed
    stats = pl.known_statistics(params, split, args.shrinkage)
    return corpus, split, stats, pl.mixed_test_set(params, split, args.order_seed)


def cmd_discriminate(args, run: Run) -> int:
    corpus, split, stats, mixed = _prepare_discrimination(args, run)
    config = _disc_config(args)
    report, d, preds = pl.run_discriminator(stats, mixed, split, config, corpus.class_names)
    run.path("report.json").write_text(report.to_json() + "\n")
    run.wrote("report.json")
    metrics.write_csv([report], run.path("report.csv"))
    run.wrote("report.csv")
    run.path("registry.json").write_text(d.registry.to_json() + "\n")
    run.wrote("registry.json")
    with open(run.path("predictions.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["position", "truth", "tag", "d1", "theta1", "d2", "theta2"])
        for i, (p, t) in enumerate(zip(preds, mixed.truth)):
            w.writerow([i, corpus.class_names[t], p.tag, repr(p.d1), repr(p.theta1),
                        metrics.UNDEFINED if p.d2 is None else repr(p.d2),
                        metrics.UNDEFINED if p.theta2 is None else repr(p.theta2)])
    run.wrote("predictions.csv")
    fmt = lambda v: "NA" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"lambda1 {report.lambda1} TKR {fmt(report.tkr)} TUR {fmt(report.tur)} WTR {fmt(report.wtr)} "
          f"KP {fmt(report.kp)} UP {fmt(report.up)} unknown labels {report.n_unknown_labels}")
    return EXIT_OK


def parse_grid(text: str) -> list[float]:
    """``"0.05:1.0:0.05"`` (inclusive) or ``"0.1,0.2"``."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0 or hi < lo:
            raise UsageError(f"bad grid {text!r}")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args, run: Run) -> int:
    grid = parse_grid(args.grid)
    if not grid:
        raise UsageError("empty lambda1 grid")
    corpus, split, stats, mixed = _prepare_discrimination(args, run)
    reports = pl.sweep(stats, mixed, split, _disc_config(args, grid[0]), grid, corpus.class_names)
    metrics.write_csv(reports, run.path("sweep.csv"))
    run.wrote("sweep.csv")
    runs, width = pl.interval_of(reports, args.threshold)
    _write_json(run, "interval.json", {"threshold": args.threshold, "runs": runs, "width": width})
    for r in reports:
        print(f"{r.lambda1:.2f} TKR {r.tkr} TUR {r.tur} WTR {r.wtr}")
    print(f"discrimination interval {runs} width {width:.2f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest into a fresh output directory
    and compare output hashes. Writes no manifest of its own."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
    except (json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"{args.manifest}: not a run manifest") from e
    if "--out" not in argv:
        raise FormatError(f"{args.manifest}: recorded argv has no --out")
    argv[argv.index("--out") + 1] = str(args.out)
    code = main(argv)
    if code:
        return code
    if manifest["code"]["sha256"] != code_fingerprint():
        log.warning("code differs from the recorded run")
    replayed = json.loads((Path(args.out) / "manifest.json").read_text())
    same = {
        name: replayed["outputs"].get(name, {}).get("sha256") == entry["sha256"]
        for name, entry in manifest["outputs"].items()
    }
    for name, ok in same.items():
        print(f"{name}: {'identical' if ok else 'DIFFERS'}")
    return EXIT_OK if all(same.values()) else EXIT_DATA


def _add_model_args(p, with_lambda=True):
    p.add_argument("--model", required=True, help="checkpoint written by `train`")
    p.add_argument("--data", required=True, help="SIGDS corpus")
    p.add_argument("--unknown", nargs="*", default=None, help="class names withheld (default: as trained)")
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--min-snr", type=float, default=None)
    p.add_argument("--metric", choices=[m.value for m in disc.MetricKind], default="mahalanobis")
    p.add_argument("--shrinkage", type=float, default=1e-3)
    if with_lambda:
        p.add_argument("--lambda2", type=float, default=1.0)
        p.add_argument("--update-known", action="store_true")
        p.add_argument("--unknown-covariance", action="store_true")
        p.add_argument("--order-seed", type=int, default=0, help="seed of the test-set presentation order")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sigzsl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a SIGDS corpus")
    p.add_argument("--classes", default="all", help="'all' or comma-separated type names")
    p.add_argument("--frames-per-class", type=int, required=True)
    p.add_argument("--snr", default="2:40:2", help="lo:hi:step (inclusive) or a comma list, dB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fading", action="store_true")
    p.add_argument("--no-awgn", action="store_true")
    p.add_argument("--max-clock-ppm", type=float, default=50.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on the known classes of a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--unknown", nargs="*", default=[], help="class names withheld from training")
    p.add_argument("--arch", choices=sorted(pl.ARCH_PRESETS), default="default")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--lambda-ct", type=float, default=0.1)
    p.add_argument("--lambda-r", type=float, default=1.0)
    p.add_argument("--no-ce", action="store_true")
    p.add_argument("--no-ct", action="store_true")
    p.add_argument("--no-r", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--min-snr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="softmax and cluster accuracy on the known test split")
    _add_model_args(p, with_lambda=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("discriminate", help="one online zero-shot pass over the mixed test set")
    _add_model_args(p)
    p.add_argument("--lambda1", type=float, default=0.4)
    p.set_defaults(func=cmd_discriminate)

    p = sub.add_parser("sweep", help="discriminate over a lambda1 grid")
    _add_model_args(p)
    p.add_argument("--grid", default="0.05:1.0:0.05")
    p.add_argument("--threshold", type=float, default=0.8)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run a recorded manifest and compare outputs")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)

    for p in sub.choices.values():
        p.add_argument("--out", required=True, help="run directory")
    return ap


def _thread_limit():
    n = os.environ.get("SIGZSL_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            if args.command == "replay":
                return cmd_replay(args)
            run = Run(args, argv)
            code = args.func(args, run)
            run.finish()
            return code
    except (FormatError, DataMismatchError, KeyError, OSError) as e:
        print(f"sigzsl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"sigzsl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"sigzsl: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
