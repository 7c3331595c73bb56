"""Training loop, batched inference and evaluation."""

from __future__ import annotations

import copy
import dataclasses
import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metrics import EvalReport, evaluate
from .model import (Sample, TedTrajRec, collate, compute_losses, prepare_sample,
                    to_map_trajectories)
from .road_network import RoadNetwork
from .trajectory_data import MapTrajectory, RawTrajectory

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "train_loss", "val_recall", "val_accuracy", "val_mae"]


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0
    tf_ratio: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 1
    lr_decay: float = 1.0        # multiplicative, per epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_recall: float = float("nan")
    val_accuracy: float = float("nan")
    val_mae: float = float("nan")

    def row(self):
        return [self.epoch, f"{self.train_loss:.6f}", f"{self.val_recall:.6f}",
                f"{self.val_accuracy:.6f}", f"{self.val_mae:.6f}"]


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def prepare_pairs(net: RoadNetwork, pairs, cfg) -> list[Sample]:
    return [prepare_sample(net, raw, cfg, target) for raw, target in pairs]


def batches(samples: Sequence[Sample], size: int, order=None):
    order = range(len(samples)) if order is None else order
    order = list(order)
    for s in range(0, len(order), size):
        yield [samples[i] for i in order[s:s + size]]


@torch.no_grad()
def recover_samples(model: TedTrajRec, net: RoadNetwork, samples: Sequence[Sample],
                    batch_size: int = 64) -> list[MapTrajectory]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    field = model.road_field()
    for chunk in batches(samples, batch_size):
        batch = collate(chunk, dtype)
        memory = model.encode(batch, field)
        res = model.decode(field, memory, batch)
        out.extend(to_map_trajectories(res, batch, chunk, net))
    return out


def recover(model: TedTrajRec, raw: RawTrajectory, net: RoadNetwork,
            eps_tau: float | None = None) -> MapTrajectory:
    """End-to-end recovery of one sparse trajectory onto the target grid."""
    cfg = model.cfg
    if eps_tau is not None and eps_tau != cfg.eps_tau:
        cfg = dataclasses.replace(cfg, eps_tau=eps_tau)
    return recover_samples(model, net, [prepare_sample(net, raw, cfg)])[0]


def evaluate_samples(model, net, samples: Sequence[Sample], targets: Sequence[MapTrajectory],
                     batch_size: int = 64) -> EvalReport:
    preds = recover_samples(model, net, samples, batch_size)
    return evaluate(net, list(targets), preds)


def fit(model: TedTrajRec, net: RoadNetwork, train: Sequence[Sample], valid: Sequence[Sample],
        valid_targets: Sequence[MapTrajectory], cfg: TrainConfig, log_path=None,
        start_epoch: int = 1, on_epoch=None) -> list[EpochRecord]:
    """Minibatch Adam training with teacher forcing; keeps the best-validation weights."""
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    records: list[EpochRecord] = []
    best, best_key = None, None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = start_epoch == 1 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            model.train()
            order = torch.randperm(len(train), generator=gen).tolist()
            total, count = 0.0, 0
            for chunk in batches(train, cfg.batch_size, order):
                batch = collate(chunk, dtype)
                out = model(batch, teacher=True, tf_ratio=cfg.tf_ratio, generator=gen)
                loss = compute_losses(out, batch.tgt_seg, batch.tgt_ratio, cfg.lam).total
                if not torch.isfinite(loss):
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch} (batch {batch.ids[:3]}...)")
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                opt.step()
                total += loss.item() * len(chunk)
                count += len(chunk)
            sched.step()
            rec = EpochRecord(epoch, total / count)
            if valid and (epoch - start_epoch + 1) % cfg.eval_every == 0:
                rep = evaluate_samples(model, net, valid, valid_targets, cfg.batch_size)
                rec.val_recall, rec.val_accuracy, rec.val_mae = rep.recall, rep.accuracy, rep.mae_m
                key = (rep.accuracy, rep.recall, -rep.mae_m)
                if best_key is None or key > best_key:
                    best_key, best = key, copy.deepcopy(model.state_dict())
            records.append(rec)
            log.info("epoch %d loss %.4f val_acc %.4f val_recall %.4f val_mae %.2f",
                     epoch, rec.train_loss, rec.val_accuracy, rec.val_recall, rec.val_mae)
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if writer is not None:
            fh.close()
    if best is not None:
        model.load_state_dict(best)
    return records


@torch.no_grad()
def initial_loss(model: TedTrajRec, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    """Mean teacher-forced loss of the current weights (no update)."""
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    total, count = 0.0, 0
    for chunk in batches(samples, cfg.batch_size):
        batch = collate(chunk, dtype)
        out = model(batch, teacher=True, tf_ratio=cfg.tf_ratio, generator=gen)
        total += float(compute_losses(out, batch.tgt_seg, batch.tgt_ratio, cfg.lam).total) * len(chunk)
        count += len(chunk)
    return total / count
