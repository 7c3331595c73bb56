"""Command-line entry point: ``tedtrajrec {synth,prepare,train,eval,recover,simeval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .metrics import MetricError
from .model import TedTrajRec
from .pipeline import SPLITS, load_split, prepare_dataset, similarity_report
from .road_network import NetworkError, grid_network, load_network, save_network
from .training import (EpochRecord, TrainingDivergence, evaluate_samples, fit, prepare_pairs,
                       recover, recover_samples, seed_everything)
from .trajectory_data import (RawTrajectory, TrajectoryError, add_gps_noise, dump_map,
                              generate_synthetic, read_jsonl, to_raw, trajectory_rng, write_jsonl)

log = logging.getLogger("tedtrajrec")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, msg, code=EXIT_DATA):
        super().__init__(msg)
        self.code = code


def _out(args, default) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "model.ckpt"


# -- commands -------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out(args, ".")
    net = grid_network(cfg.synth_rows, cfg.synth_cols, cfg.synth_spacing)
    truth = generate_synthetic(net, cfg.synth_count, cfg.synth_params(), cfg.seed)
    raws = [add_gps_noise(to_raw(t, net), cfg.synth_noise, trajectory_rng(cfg.seed + 1, t.id))
            for t in truth]
    save_network(net, out / "network.csv")
    write_jsonl(out / "raw.jsonl", raws)
    write_jsonl(out / "truth.jsonl", truth)
    print(f"wrote {len(net)} segments and {len(raws)} trajectories to {out}")
    return EXIT_OK


def cmd_prepare(cfg: RunConfig, args) -> int:
    out = _out(args, cfg.data_dir)
    net = load_network(cfg.network)
    raws = read_jsonl(cfg.raw, "raw")
    manifest = prepare_dataset(net, raws, out, cfg.eps_tau, cfg.keep_prob, cfg.seed,
                               cfg.hmm_config(), network_path=str(cfg.network))
    c = manifest["counts"]
    print(f"train/valid/test = {c['train']}/{c['valid']}/{c['test']}, "
          f"interval ratio {manifest['achieved_ratio']:.3f} (configured {manifest['configured_ratio']:.3f})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(args, cfg.out_dir)
    net = load_network(cfg.network)
    seed_everything(cfg.seed)
    start = 1
    if args.resume:
        model, meta = load_checkpoint(args.resume, net)
        start = int(meta["epoch"]) + 1
    else:
        model = TedTrajRec(net, cfg.model_config())
    mcfg = model.cfg
    train = prepare_pairs(net, load_split(cfg.data_dir, "train"), mcfg)
    valid_pairs = load_split(cfg.data_dir, "valid")
    valid = prepare_pairs(net, valid_pairs, mcfg)
    if not train:
        raise CommandError("training split is empty")

    def report(rec: EpochRecord):
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  val_acc {rec.val_accuracy:.4f}  "
              f"val_recall {rec.val_recall:.4f}  val_mae {rec.val_mae:.2f}", flush=True)

    records = fit(model, net, train, valid, [t for _, t in valid_pairs], cfg.train_config(),
                  log_path=out / "train_log.csv", start_epoch=start, on_epoch=report)
    last = records[-1].epoch if records else start - 1
    save_checkpoint(model, net, out / "model.ckpt", epoch=last)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    if valid:
        rep = evaluate_samples(model, net, valid, [t for _, t in valid_pairs], cfg.batch_size)
        (out / "metrics.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    net = load_network(cfg.network)
    model, _ = load_checkpoint(_checkpoint_path(args, cfg), net)
    pairs = load_split(cfg.data_dir, args.split)
    if not pairs:
        raise MetricError(f"split {args.split!r} is empty")
    samples = prepare_pairs(net, pairs, model.cfg)
    rep = evaluate_samples(model, net, samples, [t for _, t in pairs], cfg.batch_size)
    out = _out(args, cfg.out_dir)
    (out / f"eval_{args.split}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    print(rep.to_table())
    return EXIT_OK


def cmd_recover(cfg: RunConfig, args) -> int:
    net = load_network(args.network or cfg.network)
    model, _ = load_checkpoint(_checkpoint_path(args, cfg), net)
    eps_tau = args.eps_tau or model.cfg.eps_tau
    failures = 0
    with open(args.input, encoding="utf-8") as src, \
            open(args.output, "w", encoding="utf-8", newline="\n") as dst:
        for lineno, line in enumerate(src, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw = RawTrajectory(str(obj["id"]), obj["points"])
                rec = recover(model, raw, net, eps_tau)
            except (ValueError, KeyError, TypeError) as exc:
                failures += 1
                print(f"{args.input}: line {lineno}: {exc}", file=sys.stderr)
                continue
            dst.write(dump_map(rec) + "\n")
    return EXIT_DATA if failures else EXIT_OK


def cmd_simeval(cfg: RunConfig, args) -> int:
    net = load_network(cfg.network)
    model, _ = load_checkpoint(_checkpoint_path(args, cfg), net)
    pairs = load_split(cfg.data_dir, "test")
    ks = sorted({int(k) for k in args.ks.split(",")})
    if not pairs:
        raise MetricError("test split is empty")
    dropped = [k for k in ks if k >= len(pairs)]
    if dropped:
        log.warning("dropping k=%s: only %d test trajectories", dropped, len(pairs))
        ks = [k for k in ks if k < len(pairs)]
    if not ks:
        raise MetricError("no usable k values")
    samples = prepare_pairs(net, pairs, model.cfg)
    recovered = recover_samples(model, net, samples, cfg.batch_size)
    rep = similarity_report(net, [t for _, t in pairs], recovered, [r for r, _ in pairs],
                            args.metric, ks, cfg.hmm_config())
    out = _out(args, cfg.out_dir)
    _write_json(out / f"simeval_{args.metric}.json", rep)
    for row in ("recovered", "raw"):
        cells = "  ".join(f"R@{k}={rep[row][k]:.4f}" for k in ks)
        print(f"{row:<10} {cells}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "recover": cmd_recover, "simeval": cmd_simeval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tedtrajrec", description="Trajectory recovery toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic grid dataset")
    sub.add_parser("prepare", parents=[common], help="match, interpolate, downsample, split")
    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--resume", help="checkpoint to continue from")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint")
    ev.add_argument("--split", choices=SPLITS, default="test")
    rc = sub.add_parser("recover", parents=[common], help="recover a JSONL file of sparse trajectories")
    rc.add_argument("--checkpoint")
    rc.add_argument("--input", required=True)
    rc.add_argument("--output", required=True)
    rc.add_argument("--network")
    rc.add_argument("--eps-tau", type=float)
    se = sub.add_parser("simeval", parents=[common], help="similarity retrieval on the test split")
    se.add_argument("--checkpoint")
    se.add_argument("--metric", choices=("lcss", "edr"), default="lcss")
    se.add_argument("--ks", default="1,5,10")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NetworkError, TrajectoryError, MetricError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
