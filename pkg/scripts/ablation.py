"""Held-out accuracy of the full model against the two attention switches."""

import argparse
import json

import numpy as np

from tedtrajrec.experiments import ToySetup, ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    accs = ablation(ToySetup(), seeds=seeds, epochs=args.epochs, n_train=args.n_train)
    for name, vals in accs.items():
        print(f"{name:<15} mean {np.mean(vals):.4f}  per seed {np.round(vals, 4).tolist()}")
    print(json.dumps(accs))


if __name__ == "__main__":
    main()
