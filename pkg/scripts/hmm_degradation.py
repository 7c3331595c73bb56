"""Map-matching accuracy as the same noisy traces are sampled more sparsely."""

import argparse
import json

from tedtrajrec.experiments import hmm_degradation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=30)
    ap.add_argument("--minutes", type=float, default=40.0)
    ap.add_argument("--noise", type=float, default=5.0, help="GPS noise std, meters")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    acc = hmm_degradation(count=args.count, minutes=args.minutes, noise_m=args.noise, seed=args.seed)
    for iv, a in acc.items():
        print(f"{iv:4d} s  {a:.4f}")
    print(json.dumps(acc))


if __name__ == "__main__":
    main()
