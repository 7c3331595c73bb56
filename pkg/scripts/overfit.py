"""Train and evaluate on the same toy grid set; prints per-epoch loss."""

import argparse

from tedtrajrec.experiments import ToySetup, overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lam", type=float, default=5.0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    def show(rec):
        val = "" if rec.val_accuracy != rec.val_accuracy else f"  acc {rec.val_accuracy:.4f}"
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:8.3f}{val}", flush=True)

    res = overfit_run(ToySetup(), epochs=args.epochs, lr=args.lr, lam=args.lam,
                      batch_size=args.batch_size, seed=args.seed, on_epoch=show)
    print(res.report.to_table())
    print(f"ratio MSE {res.ratio_mse:.5f}; initial loss {res.initial_loss:.3f}; {res.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
