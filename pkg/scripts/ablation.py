#!/usr/bin/env python3
"""Block-variant sweep on the desk protocol, several seeds per variant.

Writes one CSV row per (variant, seed) and prints per-variant means.

    python3 scripts/ablation.py --variants S-then-C attention-only vanilla --seeds 0 1 2 --out ablation.csv
"""

import argparse
import csv
import logging
from collections import defaultdict

import numpy as np
import torch

from corrprune.desk import desk_run
from corrprune.network import BLOCK_VARIANTS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variants", nargs="+", choices=BLOCK_VARIANTS, default=list(BLOCK_VARIANTS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)

    scores = defaultdict(list)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "f_score", "precision", "recall", "map5", "map20", "train_s"])
        for variant in args.variants:
            for seed in args.seeds:
                run = desk_run(variant, seed, args.iterations)
                t = run.trained
                scores[variant].append(t.f_score)
                w.writerow([variant, seed, f"{t.f_score:.6f}", f"{t.precision:.6f}", f"{t.recall:.6f}",
                            f"{t.map5:.4f}", f"{t.map20:.4f}", f"{run.train_seconds:.1f}"])
                fh.flush()
                print(f"{variant:>15} seed {seed}: F {t.f_score:.3f} mAP5 {t.map5:.2f}", flush=True)
    for variant, fs in scores.items():
        print(f"{variant:>15} mean F {np.mean(fs):.3f} (sd {np.std(fs):.3f})")


if __name__ == "__main__":
    main()
