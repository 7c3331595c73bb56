"""STTExtractor: GPS point -> distance-weighted mixture of nearby road states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .pd_gnn import RoadStateField, time2vec
from .road_network import NetworkError, RoadNetwork, project_point

SECONDS_PER_DAY = 86_400


def minute_of_day(t) -> float:
    """Minutes since UTC midnight for a unix timestamp."""
    return (float(t) % SECONDS_PER_DAY) / 60.0


@dataclass
class Subregion:
    positions: np.ndarray   # dense segment indices
    dists: np.ndarray       # projection distance, meters
    weights: np.ndarray     # normalized kernel weights


def subregion_weights(net: RoadNetwork, p, eta: float, gamma: float) -> Subregion:
    """Kernel weights exp(-d^2/gamma^2) over segments within ``eta`` of ``p``.

    An empty subregion falls back to the single nearest segment.
    """
    if not (eta > 0 and gamma > 0):
        raise ValueError(f"eta and gamma must be positive, got {eta}, {gamma}")
    found = net.segment_distances(p, eta)
    if not found:
        nearest, d = project_point(net, p)
        found = {nearest.segment: (d, nearest.ratio)}
    sids = sorted(found)
    dists = np.array([found[s][0] for s in sids])
    logw = -(dists / gamma) ** 2
    w = np.exp(logw - logw.max())
    return Subregion(np.array([net.index[s] for s in sids]), dists, w / w.sum())


def mix_states(field: RoadStateField, positions: torch.Tensor, weights: torch.Tensor,
               minutes: torch.Tensor) -> torch.Tensor:
    """Weighted road-state mixture.

    ``positions``/``weights`` are (..., K) with zero weight on padding;
    ``minutes`` is (...). Returns (..., d).
    """
    states = time2vec(minutes.unsqueeze(-1).expand_as(weights), field.Omega[positions], field.b)
    states = states + field.S_hat[positions]
    return (weights.unsqueeze(-1) * states).sum(-2)


def extract_point_feature(field: RoadStateField, net: RoadNetwork, p, t: float,
                          eta: float, gamma: float) -> torch.Tensor:
    if len(net) == 0:
        raise NetworkError("empty network")
    sub = subregion_weights(net, p, eta, gamma)
    dtype = field.S_hat.dtype
    return mix_states(field, torch.as_tensor(sub.positions),
                      torch.as_tensor(sub.weights, dtype=dtype),
                      torch.tensor(minute_of_day(t), dtype=dtype))


def extract_trajectory(field: RoadStateField, net: RoadNetwork, raw, eta: float, gamma: float):
    """Feature matrix (m, d) for a raw trajectory plus its timestamps."""
    rows = []
    for i, (lon, lat, t) in enumerate(raw.points):
        try:
            rows.append(extract_point_feature(field, net, (lon, lat), t, eta, gamma))
        except (NetworkError, ValueError) as exc:
            raise type(exc)(f"point {i}: {exc}") from None
    return torch.stack(rows), list(raw.times)
