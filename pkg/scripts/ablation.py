"""Loss ablation on the desk-scale corpus: the full model against runs with
one loss switched off. Prints softmax/cluster accuracy, best WTR and the
unknown-side F1 at each model's best-WTR lambda1.

    python scripts/ablation.py --out runs/ablation
"""
import argparse
import json
from pathlib import Path

from sigzsl import losses, metrics, pipeline as pl, synth

VARIANTS = {
    "full": {},
    "no_ct": {"ct_on": False},
    "no_r": {"r_on": False},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS), choices=list(VARIANTS))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    corpus = synth.generate_dataset(synth.ALL_TYPES, 1000, [20, 25, 30, 35, 40], args.seed)
    rows = {}
    for name in args.variants:
        weights = losses.LossWeights(**{**pl.DESK_WEIGHTS.to_dict(), **VARIANTS[name]})
        res = pl.desk_run(corpus, seed=args.seed, weights=weights, max_epochs=args.epochs)
        metrics.write_csv(res.reports, args.out / f"sweep_{name}.csv")
        best = res.best()
        rows[name] = {"softmax": res.softmax.mean, "cluster": res.cluster.mean, "lambda1": best.lambda1,
                      "wtr": best.wtr, "f1_known": best.f1_known, "f1_unknown": best.f1_unknown}
        print(name, json.dumps(rows[name]), flush=True)
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
