"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the terminal output.
"""

import json
import math
import time
from collections import Counter

import numpy as np
import torch

from conftest import check_grads as _check_grads, dijkstra_oracle, vanilla_mha
from test_metrics import brute_edit, brute_lcss
from tedtrajrec import cli
from tedtrajrec.checkpoint import load_checkpoint, save_checkpoint
from tedtrajrec.experiments import ToySetup, ablation, hmm_degradation, overfit_run, similarity_uplift
from tedtrajrec.metrics import edr_distance, lcss_distance, recall_precision_f1
from tedtrajrec.model import (ModelConfig, RatioHead, TedTrajRec, collate, compute_losses,
                              predict_ratio, predict_segment, prepare_sample)
from tedtrajrec.pd_gnn import PDGNN, GATv2Layer, RoadStateField, neighbourhood_edges, time2vec
from tedtrajrec.pipeline import load_split
from tedtrajrec.road_network import (NetworkPoint, RoadNetwork, RoadSegment, grid_network,
                                     load_network, network_distance, polyline_length)
from tedtrajrec.traj_features import extract_trajectory, subregion_weights
from tedtrajrec.tedformer import (CfC, TedFormerLayer, TimeAwareMHA, cfc_evolve, decoder_layer,
                                  encoder_layer, ted_attention_scores)
from tedtrajrec.training import prepare_pairs, recover_samples
from tedtrajrec.trajectory_data import DAY0, MapTrajectory, RawTrajectory, downsample, to_raw

# overfit run settings (criterion 9); lam=1 stalls near ratio MSE 0.01, see README
OVERFIT = dict(epochs=300, batch_size=32, lam=5.0)


# -- 1 ------------------------------------------------------------------------

def check_grads(fn, params):
    return _check_grads(fn, params, tol=None)


def ring_network(spacing_m=100.0):
    """100 m square: a one-way loop of four segments plus two reverse ones (|V| = 6).

    Every segment has an in-neighbour and all of them sit within kernel range
    of a point on the square, so no gradient is structurally zero."""
    d = math.degrees(spacing_m / 6_371_000)
    c = [(104.0, 30.0), (104.0 + d / math.cos(math.radians(30.0)), 30.0),
         (104.0 + d / math.cos(math.radians(30.0)), 30.0 + d), (104.0, 30.0 + d)]
    ends = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 0), (3, 2)]
    return RoadNetwork(RoadSegment(i, (c[u], c[v]), polyline_length((c[u], c[v])), u, v)
                       for i, (u, v) in enumerate(ends))


def test_01_gradient_suite(record, f64):
    torch.manual_seed(0)
    t0 = time.time()
    errs = {}
    tiny = ring_network()

    omega, b = (torch.randn(8) * 0.1).requires_grad_(), torch.randn(8, requires_grad=True)
    t = torch.tensor([3.0, 70.0, 700.0], requires_grad=True)
    r = torch.randn(3, 8)
    errs["t2v"] = check_grads(lambda: (time2vec(t, omega, b) * r).sum(), [t, omega, b])

    g = PDGNN(len(tiny), 8, layers=2, heads=2, omega_scale=1.0).set_network(tiny)
    w = torch.randn(len(tiny), 8)
    minutes = torch.linspace(0, 3, len(tiny))
    errs["gatv2_stack"] = check_grads(
        lambda: (g().state(torch.arange(len(tiny)), minutes) * w).sum(), g.parameters())

    field = RoadStateField(torch.randn(len(tiny), 8, requires_grad=True),
                           (0.01 * torch.randn(len(tiny), 8)).requires_grad_(),
                           torch.randn(8, requires_grad=True))
    pts = [(*tiny.point_at(s, 0.4), DAY0 + 30.0 * i) for i, s in enumerate(tiny.ids[:3])]
    raw = RawTrajectory("g", pts)
    wx = torch.randn(3, 8)
    errs["stt_extractor"] = check_grads(
        lambda: (extract_trajectory(field, tiny, raw, 400.0, 30.0)[0] * wx).sum(),
        [field.S_hat, field.Omega, field.b])

    cfc = CfC(4)
    k = torch.randn(4, 4, requires_grad=True)
    dt = torch.rand(4) * 3
    rk = torch.randn(4, 4)
    errs["cfc_evolve"] = check_grads(lambda: (cfc_evolve(cfc, k, dt) * rk).sum(), [k, *cfc.parameters()])

    Q, K = torch.randn(2, 4, 4, requires_grad=True), torch.randn(2, 4, 4, requires_grad=True)
    tq, tk = torch.rand(2, 4) * 3, torch.rand(2, 4) * 3
    rs = torch.randn(2, 4, 4)
    errs["ted_attn"] = check_grads(lambda: (ted_attention_scores(Q, K, tq, tk, cfc) * rs).sum(),
                                   [Q, K, *cfc.parameters()])

    mha = TimeAwareMHA(8, 2)
    x = torch.randn(1, 4, 8, requires_grad=True)
    tx = torch.rand(1, 4) * 3
    rx = torch.randn(1, 4, 8)
    errs["ta_mha"] = check_grads(lambda: (mha(x, x, x, tx, tx) * rx).sum(), [x, *mha.parameters()])

    layer = TedFormerLayer(8, 2)
    mem, tm = torch.randn(1, 3, 8), torch.rand(1, 3) * 3
    errs["encoder_layer"] = check_grads(lambda: (encoder_layer(layer, x, tx) * rx).sum(),
                                        [x, *layer.parameters()])
    errs["decoder_layer"] = check_grads(
        lambda: (decoder_layer(layer, x[:, :1], mem, tx[:, :1], tm) * rx[:, :1]).sum(),
        [x, *layer.parameters()])

    h, wseg = torch.randn(8, requires_grad=True), torch.randn(len(tiny), 8, requires_grad=True)
    C = torch.tensor([1.0, 0.3, 0.0, 0.7, 0.2, 0.0])
    rp = torch.randn(len(tiny))
    errs["segment_head"] = check_grads(lambda: (predict_segment(h, C, wseg) * rp).sum(), [h, wseg])
    head = RatioHead(8)
    hs, s = torch.randn(3, 8, requires_grad=True), torch.randn(3, 8)
    errs["ratio_head"] = check_grads(lambda: predict_ratio(hs, s, head).sum(), [hs, *head.parameters()])

    cfg = ModelConfig(d=4, heads=2, gat_heads=2, enc_layers=1, dec_layers=1, gat_layers=1, eps_tau=15.0)
    model = TedTrajRec(tiny, cfg).double()
    target = MapTrajectory("fd", [(tiny.ids[0], 0.3 + 0.2 * i, DAY0 + 15.0 * i) for i in range(2)])
    batch = collate([prepare_sample(tiny, to_raw(target, tiny), cfg, target)], torch.float64)
    assert batch.de_t.shape[1] == 2
    errs["l_total_2step"] = check_grads(
        lambda: compute_losses(model(batch, teacher=True, tf_ratio=1.0),
                               batch.tgt_seg, batch.tgt_ratio).total,
        model.parameters())

    secs = time.time() - t0
    worst = max(errs, key=errs.get)
    record(1, "gradient suite", max(errs.values()) < 1e-4 and secs < 60,
           f"{len(errs)} checks, max rel err {errs[worst]:.2e} ({worst}), {secs:.1f} s")


# -- 2 ------------------------------------------------------------------------

def test_02_cfc_analytics(record, f64):
    torch.manual_seed(1)
    cfc = CfC(6)
    k = torch.randn(20, 6)
    _, x2, x3 = cfc.maps(k)
    e0 = (cfc_evolve(cfc, k, 0.0) - 0.5 * (x2 + x3)).abs().max().item()
    with torch.no_grad():
        cfc.xi1.weight.mul_(0.1)
        cfc.xi1.bias.fill_(2.0)
    x1, _, x3 = cfc.maps(k)
    assert (x1 > 0).all()
    einf = (cfc_evolve(cfc, k, 1e6) - x3).abs().max().item()
    record(2, "CfC analytics", e0 < 1e-9 and einf < 1e-6,
           f"|f(k,0) - mean targets| = {e0:.1e}, |f(k,1e6) - end target| = {einf:.1e}")


# -- 3 ------------------------------------------------------------------------

def test_03_vanilla_reduction(record, f64):
    torch.manual_seed(2)
    mha = TimeAwareMHA(16, 4, cfc_mode="identity")
    q, kv = torch.randn(3, 5, 16), torch.randn(3, 7, 16)
    key_mask = torch.ones(3, 7, dtype=torch.bool)
    key_mask[1, 5:] = False
    out = mha(q, kv, kv, torch.full((3, 5), 42.0), torch.full((3, 7), 42.0), key_mask)
    err = (out - vanilla_mha(mha, q, kv, kv, key_mask)).abs().max().item()
    # the model-level switch builds exactly this attention
    model = TedTrajRec(grid_network(2, 2, 300.0), ModelConfig(d=8, heads=2, gat_heads=2, attention="full"))
    modes = {m.cfc.mode for m in model.modules() if isinstance(m, TimeAwareMHA)}
    record(3, "vanilla-attention reduction", err < 1e-7 and modes == {"identity"},
           f"max |diff| {err:.1e}, attention modes under the switch {sorted(modes)}")


# -- 4 ------------------------------------------------------------------------

def test_04_time_shift(record, f64):
    torch.manual_seed(3)
    cfc = CfC(8)
    Q, K = torch.randn(2, 3, 6, 8), torch.randn(2, 3, 9, 8)
    tq, tk = torch.rand(2, 3, 6) * 50, torch.rand(2, 3, 9) * 50
    base = ted_attention_scores(Q, K, tq, tk, cfc)
    err = max((ted_attention_scores(Q, K, tq + c, tk + c, cfc) - base).abs().max().item()
              for c in (0.5, -17.0, 1000.0, 5760.0))
    record(4, "time-shift covariance", err < 1e-9, f"max |score change| {err:.1e}")


# -- 5 ------------------------------------------------------------------------

def test_05_normalization(record, f64, grid):
    torch.manual_seed(4)
    worst, zero_ok = 0.0, True

    mha = TimeAwareMHA(8, 2)
    x = torch.randn(2, 6, 8)
    mask = torch.ones(2, 6, dtype=torch.bool)
    mask[0, 4:] = False
    _, attn = mha(x, x, x, torch.rand(2, 6) * 9, torch.rand(2, 6) * 9, mask, return_attention=True)
    worst = max(worst, (attn.sum(-1) - 1).abs().max().item())
    zero_ok &= bool(attn[0, ..., 4:].eq(0).all())

    layer = GATv2Layer(8, 2)
    edges = neighbourhood_edges(grid)
    _, alpha = layer(torch.randn(len(grid), 8), edges, return_attention=True)
    sums = torch.zeros(len(grid), 2).index_add(0, edges[1], alpha)
    worst = max(worst, (sums - 1).abs().max().item())

    rng = np.random.default_rng(4)
    for _ in range(50):
        p = (104.0 + rng.random() * 0.01, 30.0 + rng.random() * 0.01)
        worst = max(worst, abs(subregion_weights(grid, p, 400.0, 30.0).weights.sum() - 1))

    w = torch.randn(len(grid), 8)
    for _ in range(50):
        C = torch.rand(len(grid)) * (torch.rand(len(grid)) < 0.3)
        C[int(rng.integers(len(grid)))] = 0.5
        p = predict_segment(torch.randn(8), C, w)
        worst = max(worst, abs(p.sum().item() - 1))
        zero_ok &= bool(p[C == 0].eq(0).all())

    record(5, "normalization invariants", worst < 1e-6 and zero_ok,
           f"max |row sum - 1| {worst:.1e}, masked-out probabilities exactly zero: {zero_ok}")


# -- 6 ------------------------------------------------------------------------

def test_06_metric_oracles(record, grid):
    t0 = time.time()
    rng = np.random.default_rng(6)
    dist_err = 0.0
    for _ in range(40):
        a = NetworkPoint(int(rng.choice(grid.ids)), float(rng.random()))
        b = NetworkPoint(int(rng.choice(grid.ids)), float(rng.random()))
        dist_err = max(dist_err, abs(network_distance(grid, a, b) - dijkstra_oracle(grid, a, b)))
    dp_ok = True
    for _ in range(400):
        a = rng.integers(0, 4, rng.integers(1, 9)).tolist()
        b = rng.integers(0, 4, rng.integers(1, 9)).tolist()
        dp_ok &= lcss_distance(a, b) == 1 - brute_lcss(a, b) / min(len(a), len(b))
        dp_ok &= edr_distance(a, b) == brute_edit(a, b) / max(len(a), len(b))
        inter = sum((Counter(a) & Counter(b)).values())
        r, p, f = recall_precision_f1(a, b)
        dp_ok &= (r, p) == (inter / len(a), inter / len(b))
        dp_ok &= math.isclose(f, 0.0 if inter == 0 else 2 * r * p / (r + p), abs_tol=1e-12)
    secs = time.time() - t0
    record(6, "metric oracles", dist_err < 1e-6 and dp_ok and secs < 30,
           f"network distance max err {dist_err:.1e} m on {len(grid)} segments, "
           f"DP metrics exact: {dp_ok}, {secs:.1f} s")


# -- 7 ------------------------------------------------------------------------

def test_07_hmm_degradation(record):
    t0 = time.time()
    acc = hmm_degradation()
    secs = time.time() - t0
    vals = list(acc.values())
    monotone = all(a > b for a, b in zip(vals, vals[1:]))
    record(7, "HMM degradation", monotone and acc[10] >= 0.95 and secs < 300,
           ", ".join(f"{k}s: {v:.3f}" for k, v in acc.items()) + f" ({secs:.0f} s)")


# -- 8 ------------------------------------------------------------------------

def test_08_downsampling(record):
    rng = np.random.default_rng(8)
    kept = interior = 0
    ends_ok = True
    for i in range(40):
        n = int(rng.integers(200, 400))
        raw = RawTrajectory(f"d{i}", [(104.0, 30.0, float(j)) for j in range(n)])
        out = downsample(raw, 0.125, i)
        ends_ok &= out.points[0] == raw.points[0] and out.points[-1] == raw.points[-1]
        kept += len(out.points) - 2
        interior += n - 2
    frac = kept / interior
    record(8, "downsampling statistics", interior >= 10_000 and abs(frac - 0.125) <= 0.01 and ends_ok,
           f"kept {frac:.4f} of {interior} interior points, endpoints kept: {ends_ok}")


# -- 9 ------------------------------------------------------------------------

def test_09_overfit(record):
    res = overfit_run(ToySetup(), **OVERFIT)
    seq = [res.initial_loss] + res.losses[:10]
    band_ok = all(b <= a * 1.05 for a, b in zip(seq, seq[1:]))
    ok = res.report.accuracy >= 0.95 and res.ratio_mse < 0.01 and band_ok and res.seconds < 1800
    record(9, "end-to-end overfit", ok,
           f"accuracy {res.report.accuracy:.4f}, ratio MSE {res.ratio_mse:.4f}, "
           f"first-10-epoch band ok: {band_ok}, {res.seconds / 60:.1f} min")


# -- 10 -----------------------------------------------------------------------

def test_10_ablation(record):
    accs = ablation(ToySetup())
    mean = {k: float(np.mean(v)) for k, v in accs.items()}
    ok = mean["ted"] >= mean["full_attention"] and mean["ted"] >= mean["no_time"]
    record(10, "ablation ordering", ok,
           ", ".join(f"{k} {m:.4f} {np.round(accs[k], 4).tolist()}" for k, m in mean.items()))


# -- 11 -----------------------------------------------------------------------

def test_11_similarity_uplift(record):
    rep = similarity_uplift(ToySetup())
    rec, raw = rep["recovered"][1], rep["raw"][1]
    record(11, "similarity uplift", rec > raw,
           f"LCSS R@1 recovered {rec:.3f} vs raw input {raw:.3f} (recovery accuracy {rep['accuracy']:.3f})")


# -- 12 -----------------------------------------------------------------------

def test_12_reproducibility(record, tmp_path):
    conf = tmp_path / "config.json"
    conf.write_text(json.dumps({"d": 16, "heads": 2, "gat_heads": 2, "epochs": 2, "batch_size": 16,
                                "synth_count": 60, "synth_min_points": 12, "synth_max_points": 18,
                                "network": str(tmp_path / "network.csv"),
                                "raw": str(tmp_path / "raw.jsonl")}))
    run = lambda *a: cli.main([*a, "--config", str(conf)])
    assert run("synth", "--out", str(tmp_path)) == 0
    same = True
    for k in (1, 2):
        assert run("prepare", "--out", str(tmp_path / f"data{k}")) == 0
        assert run("train", "--out", str(tmp_path / f"run{k}"), "--set", f"data_dir={tmp_path / 'data1'}") == 0
    for f in (tmp_path / "data1").iterdir():
        same &= (tmp_path / "data2" / f.name).read_bytes() == f.read_bytes()
    for name in ("train_log.csv", "metrics.json", "model.ckpt"):
        same &= (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()

    net = load_network(tmp_path / "network.csv")
    model, _ = load_checkpoint(tmp_path / "run1" / "model.ckpt", net)
    save_checkpoint(model, net, tmp_path / "again.ckpt", epoch=2)
    reloaded, _ = load_checkpoint(tmp_path / "again.ckpt", net)
    pairs = load_split(tmp_path / "data1", "test")
    samples = prepare_pairs(net, pairs, model.cfg)
    round_trip = (recover_samples(model, net, samples) == recover_samples(reloaded, net, samples)
                  and (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "run1" / "model.ckpt").read_bytes())
    record(12, "reproducibility and persistence", same and round_trip,
           f"identical manifests/logs/metrics/checkpoints across runs: {same}, "
           f"checkpoint round trip bit-identical: {round_trip}")
