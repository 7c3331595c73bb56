"""Scaled-down experiments on synthetic grid cities.

Each function is self-contained and seeded so the acceptance tests and the
scripts in ``scripts/`` produce the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .metrics import EvalReport, METRICS, evaluate, rank_eval
from .model import ModelConfig, TedTrajRec
from .pipeline import raw_segment_sequence
from .road_network import RoadNetwork, grid_network
from .training import TrainConfig, fit, initial_loss, prepare_pairs, recover_samples, seed_everything
from .trajectory_data import (HMMConfig, RawTrajectory, SynthParams, add_gps_noise, downsample,
                              generate_synthetic, hmm_map_match, to_raw, trajectory_rng)


@dataclass
class ToySetup:
    rows: int = 4
    cols: int = 4
    spacing_m: float = 300.0
    count: int = 200
    eps_tau: float = 15.0
    min_points: int = 20
    max_points: int = 30
    keep_prob: float = 0.125
    peak_factor: float = 2.5
    d: int = 64
    heads: int = 4
    data_seed: int = 0

    def network(self) -> RoadNetwork:
        return grid_network(self.rows, self.cols, self.spacing_m)

    def synth_params(self) -> SynthParams:
        return SynthParams(eps_tau=self.eps_tau, min_points=self.min_points,
                           max_points=self.max_points, peak_factor=self.peak_factor)

    def model_config(self, **kw) -> ModelConfig:
        return ModelConfig(d=self.d, heads=self.heads, gat_heads=self.heads,
                           eps_tau=self.eps_tau, **kw)


def toy_pairs(net: RoadNetwork, setup: ToySetup, count: int | None = None, seed: int | None = None):
    """Ground-truth walks and their downsampled inputs."""
    seed = setup.data_seed if seed is None else seed
    truth = generate_synthetic(net, setup.count if count is None else count,
                               setup.synth_params(), seed)
    return [(downsample(t, setup.keep_prob, seed, net), t) for t in truth]


# -- map matching vs sampling interval ------------------------------------

def hmm_degradation(intervals=(10, 20, 40, 80, 160), count: int = 30, minutes: float = 40.0,
                    noise_m: float = 5.0, rows: int = 6, cols: int = 6, spacing_m: float = 200.0,
                    seed: int = 0, hmm: HMMConfig | None = None) -> dict[int, float]:
    """Point-level matching accuracy when the same noisy traces are thinned.

    Walks are generated at the finest interval and every coarser interval is
    an exact stride of it, so all settings see identical GPS fixes.
    """
    base = intervals[0]
    if any(iv % base for iv in intervals):
        raise ValueError("intervals must be multiples of the first one")
    net = grid_network(rows, cols, spacing_m)
    n = int(minutes * 60 / base) + 1
    truth = generate_synthetic(net, count, SynthParams(eps_tau=base, min_points=n, max_points=n), seed)
    noisy = [add_gps_noise(to_raw(t, net), noise_m, trajectory_rng(seed, t.id)) for t in truth]
    out = {}
    for iv in intervals:
        stride = iv // base
        ok = total = 0
        for t, r in zip(truth, noisy):
            idx = list(range(0, len(t.points), stride))
            sub = RawTrajectory(r.id, [r.points[i] for i in idx])
            matched = hmm_map_match(net, sub, hmm).segments
            ok += sum(matched[j] == t.segments[i] for j, i in enumerate(idx))
            total += len(idx)
        out[iv] = ok / total
    return out


# -- training runs --------------------------------------------------------

@dataclass
class RunResult:
    report: EvalReport
    ratio_mse: float
    losses: list[float]
    initial_loss: float
    seconds: float


def ratio_mse(targets, preds) -> float:
    err = [(a - b) ** 2 for t, p in zip(targets, preds) for a, b in zip(t.ratios, p.ratios)]
    return float(np.mean(err))


def train_and_eval(net: RoadNetwork, train_pairs, eval_pairs, mcfg: ModelConfig, tcfg: TrainConfig,
                   valid_pairs=None, on_epoch=None) -> RunResult:
    """Fit on ``train_pairs`` (selecting on ``valid_pairs``) and score ``eval_pairs``."""
    t0 = time.time()
    seed_everything(tcfg.seed)
    model = TedTrajRec(net, mcfg)
    train = prepare_pairs(net, train_pairs, mcfg)
    valid_pairs = eval_pairs if valid_pairs is None else valid_pairs
    valid = prepare_pairs(net, valid_pairs, mcfg)
    start = initial_loss(model, train, tcfg)
    recs = fit(model, net, train, valid, [t for _, t in valid_pairs], tcfg, on_epoch=on_epoch)
    samples = valid if eval_pairs is valid_pairs else prepare_pairs(net, eval_pairs, mcfg)
    targets = [t for _, t in eval_pairs]
    preds = recover_samples(model, net, samples)
    return RunResult(evaluate(net, targets, preds), ratio_mse(targets, preds),
                     [r.train_loss for r in recs], start, time.time() - t0)


def overfit_run(setup: ToySetup | None = None, epochs: int = 300, lr: float = 1e-3,
                lam: float = 1.0, lr_decay: float = 1.0, eval_every: int = 10, seed: int = 0,
                batch_size: int = 64, on_epoch=None) -> RunResult:
    """Train and score on the same toy set."""
    setup = setup or ToySetup()
    net = setup.network()
    pairs = toy_pairs(net, setup)
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, lam=lam, lr_decay=lr_decay,
                       eval_every=eval_every, seed=seed)
    return train_and_eval(net, pairs, pairs, setup.model_config(), tcfg, on_epoch=on_epoch)


ABLATIONS = {
    "ted": {},
    "full_attention": {"attention": "full"},
    "no_time": {"use_time": False},
}


def ablation(setup: ToySetup | None = None, seeds=(0, 1, 2), epochs: int = 30,
             n_train: int = 1000, n_valid: int = 60, n_test: int = 100, eval_every: int = 5,
             batch_size: int = 64, variants=None) -> dict[str, list[float]]:
    """Held-out accuracy per variant and seed; data are shared across variants."""
    setup = setup or ToySetup()
    net = setup.network()
    pairs = toy_pairs(net, setup, n_train + n_valid + n_test)
    train, valid = pairs[:n_train], pairs[n_train:n_train + n_valid]
    test = pairs[n_train + n_valid:]
    out = {}
    for name, kw in (variants or ABLATIONS).items():
        accs = []
        for s in seeds:
            tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, eval_every=eval_every, seed=s)
            res = train_and_eval(net, train, test, setup.model_config(**kw), tcfg, valid_pairs=valid)
            accs.append(res.report.accuracy)
        out[name] = accs
    return out


def similarity_uplift(setup: ToySetup | None = None, epochs: int = 30, n_train: int = 1000,
                      n_valid: int = 60, n_test: int = 100, metric: str = "lcss", ks=(1, 5, 10),
                      batch_size: int = 64, seed: int = 0) -> dict:
    """R@k of recovered trajectories against retrieval on the sparse inputs."""
    setup = setup or ToySetup()
    net = setup.network()
    pairs = toy_pairs(net, setup, n_train + n_valid + n_test)
    train, valid = pairs[:n_train], pairs[n_train:n_train + n_valid]
    test = pairs[n_train + n_valid:]
    mcfg = setup.model_config()
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, eval_every=5, seed=seed)
    seed_everything(seed)
    model = TedTrajRec(net, mcfg)
    fit(model, net, prepare_pairs(net, train, mcfg), prepare_pairs(net, valid, mcfg),
        [t for _, t in valid], tcfg)
    preds = recover_samples(model, net, prepare_pairs(net, test, mcfg))
    fn = METRICS[metric]
    truth = [t.segments for _, t in test]
    raw = [raw_segment_sequence(net, r) for r, _ in test]
    return {
        "accuracy": evaluate(net, [t for _, t in test], preds).accuracy,
        "recovered": rank_eval(truth, [p.segments for p in preds], fn, ks),
        "raw": rank_eval(truth, raw, fn, ks),
    }
