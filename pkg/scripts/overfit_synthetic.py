"""Overfit the desk-scale model on generated corpora, one run per seed.

    python scripts/overfit_synthetic.py --seeds 0 1 2 3
    python scripts/overfit_synthetic.py --seeds 0 1 2 3 --dropout 0.1   # shows the collapse seeds
"""

import argparse
import csv
import sys

from tern import numerics as nx
from tern.config import RunConfig
from tern.experiments import overfit_synthetic


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--geometry-mode", default="conventional", choices=["conventional", "paper-literal"])
    ap.add_argument("--allow-same-image-negatives", action="store_true")
    ap.add_argument("--precision", default="float32", choices=["float32", "float64"])
    ap.add_argument("--history", help="write per-epoch loss / R@1 / NDCG to this CSV")
    args = ap.parse_args(argv)

    rows = []
    print(f"{'seed':>4} {'epochs':>6} {'R@1':>6} {'NDCG@25':>8} {'sec':>6}  converged")
    with nx.precision(args.precision):
        for seed in args.seeds:
            cfg = RunConfig.desk()
            cfg.model.dropout = args.dropout
            cfg.model.geometry_mode = args.geometry_mode
            cfg.train.lr = args.lr
            cfg.train.seed = seed
            cfg.train.exclude_same_image = not args.allow_same_image_negatives
            res = overfit_synthetic(seed, cfg, max_epochs=args.max_epochs)
            r = res.report
            print(f"{seed:>4} {res.epochs:>6} {r.recall[1]:>6.3f} {r.ndcg['rouge_l']:>8.4f} "
                  f"{res.seconds:>6.1f}  {res.converged}")
            rows += [(seed, *h) for h in res.history]
    if args.history:
        with open(args.history, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "epoch", "loss", "recall1", "ndcg25"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
