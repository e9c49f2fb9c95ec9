"""Desk-scale zero-shot run: 11 types x 1000 frames at 20..40 dB, CPFSK and
B-FM withheld, training on the other nine, then a lambda1 sweep.

    python scripts/desk_zsl.py --out runs/desk
"""
import argparse
import json
import time
from pathlib import Path

from sigzsl import dataset as ds, losses, metrics, pipeline as pl, synth, trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--frames-per-class", type=int, default=1000)
    ap.add_argument("--snr", default="20:40:5")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--arch", choices=sorted(pl.ARCH_PRESETS), default="desk")
    ap.add_argument("--lambda-r", type=float, default=pl.DESK_WEIGHTS.lambda_r)
    ap.add_argument("--no-fading", action="store_true", help="fixed multipath gains instead of Rayleigh draws")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    profile = synth.ChannelProfile(rayleigh_fading=not args.no_fading)
    corpus = synth.generate_dataset(synth.ALL_TYPES, args.frames_per_class, synth.parse_snr_grid(args.snr),
                                    args.seed, profile=profile)
    ds.write_sigds(corpus, args.out / "corpus.sigds")
    weights = losses.LossWeights(lambda_r=args.lambda_r)
    t0 = time.time()
    res = pl.desk_run(corpus, seed=args.seed, arch=args.arch, weights=weights, max_epochs=args.epochs,
                      on_epoch=lambda r: print(f"epoch {r.epoch:3d} ce {r.ce:.4f} ct {r.ct:.4f} "
                                               f"r {r.r:.4f} val {r.val_softmax_acc:.4f}", flush=True))
    trainer.write_history(res.fit.history, args.out / "history.csv")
    metrics.write_csv(res.reports, args.out / "sweep.csv")
    for r in res.reports:
        print(f"lambda1 {r.lambda1:.2f} TKR {r.tkr:.3f} TUR {r.tur:.3f} WTR {r.wtr:.3f} F1u {r.f1_unknown}")
    runs, width = res.interval
    summary = {
        "seconds": round(time.time() - t0, 1), "epochs": len(res.fit.history), "best_epoch": res.fit.best_epoch,
        "softmax_acc": res.softmax.mean, "cluster_acc": res.cluster.mean,
        "best_lambda1": res.best().lambda1, "best_wtr": res.best().wtr, "interval_runs": runs,
        "interval_width": width,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
