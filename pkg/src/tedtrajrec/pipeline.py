"""File-level pipeline steps shared by the CLI and the experiment scripts."""

from __future__ import annotations

import json
from pathlib import Path

from .metrics import METRICS, rank_eval
from .road_network import RoadNetwork, project_point
from .trajectory_data import (HMMConfig, MapTrajectory, MatchError, RawTrajectory,
                              TrajectoryError, build_splits, downsample, hmm_map_match,
                              interpolate_to_interval, read_jsonl, write_jsonl)

SPLITS = ("train", "valid", "test")


def make_pair(net: RoadNetwork, raw: RawTrajectory, eps_tau: float, keep_prob: float,
              seed: int, hmm: HMMConfig | None = None) -> tuple[RawTrajectory, MapTrajectory]:
    """Raw trace -> (sparse input, dense map-constrained target)."""
    matched = hmm_map_match(net, raw, hmm)
    target = interpolate_to_interval(net, matched, eps_tau)
    if len(target.points) < 2:
        raise TrajectoryError(f"trajectory {raw.id}: shorter than one target interval")
    return downsample(target, keep_prob, seed, net), target


def achieved_ratio(inputs, eps_tau: float) -> float:
    """Pooled mean input sampling interval in units of ``eps_tau``."""
    span = sum(r.points[-1][2] - r.points[0][2] for r in inputs)
    gaps = sum(len(r.points) - 1 for r in inputs)
    return span / gaps / eps_tau


def prepare_dataset(net: RoadNetwork, raws, out_dir, eps_tau: float, keep_prob: float,
                    seed: int, hmm: HMMConfig | None = None, network_path: str = "") -> dict:
    """Match, interpolate, downsample and split; writes JSONL files and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for raw in raws:
        try:
            pairs.append(make_pair(net, raw, eps_tau, keep_prob, seed, hmm))
        except TrajectoryError as exc:
            msg = str(exc)
            if raw.id not in msg:
                msg = f"trajectory {raw.id}: {msg}"
            raise TrajectoryError(msg) from None
    split = build_splits(pairs, seed)
    counts = {}
    for name in SPLITS:
        part = getattr(split, name)
        write_jsonl(out / f"{name}.input.jsonl", [p[0] for p in part])
        write_jsonl(out / f"{name}.target.jsonl", [p[1] for p in part])
        counts[name] = len(part)
    manifest = {
        "counts": counts,
        "seed": seed,
        "eps_tau": eps_tau,
        "keep_prob": keep_prob,
        "configured_ratio": 1.0 / keep_prob,
        "achieved_ratio": achieved_ratio([p[0] for p in pairs], eps_tau),
        "network": network_path,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir, name: str):
    d = Path(data_dir)
    inputs = read_jsonl(d / f"{name}.input.jsonl", "raw")
    targets = read_jsonl(d / f"{name}.target.jsonl", "map")
    if [r.id for r in inputs] != [t.id for t in targets]:
        raise TrajectoryError(f"{name}: input and target files are not aligned")
    return list(zip(inputs, targets))


def raw_segment_sequence(net: RoadNetwork, raw: RawTrajectory, hmm: HMMConfig | None = None) -> list[int]:
    """Segment sequence of a sparse input used directly for retrieval."""
    try:
        return hmm_map_match(net, raw, hmm).segments
    except MatchError:
        return [project_point(net, p)[0].segment for p in raw.coords]


def similarity_report(net: RoadNetwork, truths, recovered, raws, metric: str, ks,
                      hmm: HMMConfig | None = None) -> dict:
    fn = METRICS[metric]
    truth_seqs = [t.segments for t in truths]
    raw_seqs = [raw_segment_sequence(net, r, hmm) for r in raws]
    return {
        "metric": metric,
        "count": len(truths),
        "recovered": rank_eval(truth_seqs, [t.segments for t in recovered], fn, ks),
        "raw": rank_eval(truth_seqs, raw_seqs, fn, ks),
        "truth": rank_eval(truth_seqs, truth_seqs, fn, ks),
    }
