"""Recovery metrics and segment-sequence similarity measures."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .road_network import NetworkPoint, RoadNetwork


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    accuracy: float
    mae_m: float
    rmse_m: float
    recall: float
    precision: float
    f1: float
    count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_table(self) -> str:
        rows = asdict(self)
        width = max(map(len, rows))
        lines = []
        for k, v in rows.items():
            val = f"{v:d}" if isinstance(v, int) else f"{v:.4f}"
            lines.append(f"{k:<{width}}  {val:>12}")
        return "\n".join(lines)


def _same_length(a, b):
    if len(a.points) != len(b.points):
        raise MetricError(f"length mismatch: {len(a.points)} vs {len(b.points)}")


def accuracy(target, pred) -> float:
    _same_length(target, pred)
    hits = sum(a == b for a, b in zip(target.segments, pred.segments))
    return hits / len(target.points)


def point_errors(net: RoadNetwork, target, pred) -> np.ndarray:
    _same_length(target, pred)
    return np.array([
        net.network_distance(NetworkPoint(s, r), NetworkPoint(ps, pr))
        for (s, r, _), (ps, pr, _) in zip(target.points, pred.points)
    ])


def mae_rmse(net: RoadNetwork, target, pred) -> tuple[float, float]:
    err = point_errors(net, target, pred)
    return float(err.mean()), float(math.sqrt((err ** 2).mean()))


def recall_precision_f1(target: Sequence[int], pred: Sequence[int]) -> tuple[float, float, float]:
    """Multiset overlap of two segment sequences."""
    if len(target) == 0 or len(pred) == 0:
        raise MetricError("recall/precision need non-empty sequences")
    inter = sum((Counter(target) & Counter(pred)).values())
    r, p = inter / len(target), inter / len(pred)
    f1 = 0.0 if r + p == 0 else 2 * r * p / (r + p)
    return r, p, f1


def lcss_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def lcss_distance(a: Sequence, b: Sequence) -> float:
    if not a or not b:
        raise MetricError("LCSS needs non-empty sequences")
    return 1.0 - lcss_length(a, b) / min(len(a), len(b))


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def edr_distance(a: Sequence, b: Sequence) -> float:
    if not a or not b:
        raise MetricError("EDR needs non-empty sequences")
    return edit_distance(a, b) / max(len(a), len(b))


METRICS: dict[str, Callable] = {"lcss": lcss_distance, "edr": edr_distance}


def distance_matrix(seqs: Sequence[Sequence], metric: Callable) -> np.ndarray:
    n = len(seqs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = metric(seqs[i], seqs[j])
    return out


def rank_eval(truth: Sequence[Sequence], recovered: Sequence[Sequence], metric: Callable,
              ks: Sequence[int], truth_metric: Callable | None = None) -> dict[int, float]:
    """R@k: share of queries whose true nearest neighbour is in the recovered top-k.

    Sequences are segment-id lists aligned by position; ties (both for the
    true neighbour and for the ranking) go to the smaller index.
    ``truth_metric`` defaults to ``metric``.
    """
    n = len(truth)
    if len(recovered) != n:
        raise MetricError("truth and recovered sets differ in size")
    if n < max(ks) + 1:
        raise MetricError(f"need at least {max(ks) + 1} trajectories, got {n}")
    true_d = distance_matrix(truth, truth_metric or metric)
    rec_d = distance_matrix(recovered, metric)
    hits = {k: 0 for k in ks}
    for i in range(n):
        others = [j for j in range(n) if j != i]
        ts = min(others, key=lambda j: (true_d[i, j], j))
        ranked = sorted(others, key=lambda j: (rec_d[i, j], j))
        pos = ranked.index(ts)
        for k in ks:
            hits[k] += pos < k
    return {k: hits[k] / n for k in ks}


def evaluate(net: RoadNetwork, targets, preds) -> EvalReport:
    """Per-trajectory metrics averaged over the set."""
    if not targets:
        raise MetricError("nothing to evaluate")
    if len(targets) != len(preds):
        raise MetricError("targets and predictions differ in count")
    acc, mae, rmse, rec, prec, f1 = ([] for _ in range(6))
    for t, p in zip(targets, preds):
        acc.append(accuracy(t, p))
        m, r = mae_rmse(net, t, p)
        mae.append(m)
        rmse.append(r)
        a, b, c = recall_precision_f1(t.segments, p.segments)
        rec.append(a)
        prec.append(b)
        f1.append(c)
    mean = lambda xs: float(np.mean(xs))
    return EvalReport(mean(acc), mean(mae), mean(rmse), mean(rec), mean(prec), mean(f1), len(targets))
