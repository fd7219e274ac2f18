#!/usr/bin/env python3
"""Train on the desk dataset and report held-out metrics.

    python3 scripts/desk_train.py --variant S-then-C --seed 0
    python3 scripts/desk_train.py --variant attention-only --seeds 0 1 2
"""

import argparse
import logging

import numpy as np
import torch

from corrprune.desk import desk_run
from corrprune.network import BLOCK_VARIANTS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variant", choices=BLOCK_VARIANTS, default="S-then-C")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iterations", type=int, default=2000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)
    fs = []
    for seed in args.seeds:
        run = desk_run(args.variant, seed, args.iterations)
        t = run.trained
        fs.append(t.f_score)
        print(f"{args.variant} seed {seed}: untrained F {run.untrained.f_score:.3f} | "
              f"F {t.f_score:.3f} P {t.precision:.3f} R {t.recall:.3f} "
              f"mAP5 {t.map5:.2f} mAP20 {t.map20:.2f} | train {run.train_seconds:.0f}s", flush=True)
    if len(fs) > 1:
        print(f"{args.variant} mean F {np.mean(fs):.3f}")


if __name__ == "__main__":
    main()
