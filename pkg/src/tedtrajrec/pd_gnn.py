"""Periodic dynamic-aware road representation.

A stack of GATv2 layers turns the free segment table into topology-aware
embeddings; two linear heads then yield a static part ``S_hat`` and per-segment
frequencies ``Omega`` so that the state of segment i at minute-of-day t is
``time2vec(t; Omega_i, b) + S_hat_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .road_network import RoadNetwork

MINUTES_PER_DAY = 1440.0


def time2vec(t: torch.Tensor, omega: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Linear first channel, sine on the rest.

    ``t`` has shape (...), ``omega`` (..., d) and ``b`` (d,); returns (..., d).
    """
    lin = omega * t.unsqueeze(-1) + b
    return torch.cat([lin[..., :1], torch.sin(lin[..., 1:])], dim=-1)


def neighbourhood_edges(net: RoadNetwork) -> torch.Tensor:
    """(2, E) long tensor of (src, dst) dense indices: in-neighbours plus self loops."""
    pairs = {(net.index[a], net.index[b]) for a, b in net.edges}
    pairs |= {(i, i) for i in range(len(net))}
    src, dst = zip(*sorted(pairs, key=lambda e: (e[1], e[0])))
    return torch.tensor([src, dst], dtype=torch.long)


def segment_softmax(logits: torch.Tensor, group: torch.Tensor, n_groups: int) -> torch.Tensor:
    """Softmax of ``logits`` (E, K) within groups given by ``group`` (E,)."""
    k = logits.shape[1]
    idx = group.unsqueeze(1).expand(-1, k)
    gmax = torch.full((n_groups, k), -math.inf, dtype=logits.dtype, device=logits.device)
    gmax = gmax.scatter_reduce(0, idx, logits, reduce="amax", include_self=True)
    ex = torch.exp(logits - gmax[group])
    denom = torch.zeros((n_groups, k), dtype=logits.dtype, device=logits.device).index_add(0, group, ex)
    return ex / denom[group]


class GATv2Layer(nn.Module):
    def __init__(self, d: int, heads: int, negative_slope: float = 0.2):
        super().__init__()
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide d ({d})")
        self.d, self.heads, self.d_h = d, heads, d // heads
        self.slope = negative_slope
        # [W_dst | W_src] acting on the concatenation [u_i || u_j]
        self.w_dst = nn.Linear(d, d, bias=False)
        self.w_src = nn.Linear(d, d, bias=False)
        self.att = nn.Parameter(torch.empty(heads, self.d_h))
        nn.init.xavier_uniform_(self.att)

    def forward(self, x: torch.Tensor, edges: torch.Tensor, return_attention: bool = False):
        if x.dim() != 2 or x.shape[1] != self.d:
            raise ValueError(f"expected features of shape (|V|, {self.d}), got {tuple(x.shape)}")
        n = x.shape[0]
        src, dst = edges
        xs = self.w_src(x).view(n, self.heads, self.d_h)
        xd = self.w_dst(x).view(n, self.heads, self.d_h)
        z = F.leaky_relu(xd[dst] + xs[src], self.slope)
        logits = (z * self.att).sum(-1)                       # (E, K)
        alpha = segment_softmax(logits, dst, n)
        msg = alpha.unsqueeze(-1) * xs[src]                   # (E, K, d_h)
        agg = torch.zeros((n, self.heads, self.d_h), dtype=x.dtype, device=x.device).index_add(0, dst, msg)
        out = F.leaky_relu(agg, self.slope).reshape(n, self.d)
        return (out, alpha) if return_attention else out


@dataclass
class RoadStateField:
    S_hat: torch.Tensor   # (|V|, d)
    Omega: torch.Tensor   # (|V|, d)
    b: torch.Tensor       # (d,)

    def state(self, seg: torch.Tensor, minutes: torch.Tensor) -> torch.Tensor:
        """Road state of dense segment indices ``seg`` at ``minutes`` (same shape)."""
        return time2vec(minutes, self.Omega[seg], self.b) + self.S_hat[seg]


class PDGNN(nn.Module):
    """Segment table -> GATv2 stack -> (S_hat, Omega) heads.

    ``omega_scale`` multiplies the frequency head so that unit-scale weights
    give day-scale periods for minute inputs; ``use_time=False`` pins Omega
    to zero.
    """

    def __init__(self, n_segments: int, d: int, layers: int = 2, heads: int = 4,
                 omega_scale: float = 2 * math.pi / MINUTES_PER_DAY, use_time: bool = True,
                 negative_slope: float = 0.2):
        super().__init__()
        if layers < 1:
            raise ValueError("PD-GNN needs at least one GATv2 layer")
        self.S = nn.Parameter(torch.randn(n_segments, d) / math.sqrt(d))
        self.gat = nn.ModuleList(GATv2Layer(d, heads, negative_slope) for _ in range(layers))
        self.head_s = nn.Linear(d, d)
        self.head_o = nn.Linear(d, d)
        self.b = nn.Parameter(torch.zeros(d))
        self.omega_scale = omega_scale
        self.use_time = use_time
        self.register_buffer("edges", torch.zeros(2, 0, dtype=torch.long), persistent=False)

    def set_network(self, net: RoadNetwork):
        self.edges = neighbourhood_edges(net)
        return self

    def encode_graph(self, return_attention: bool = False):
        x, attn = self.S, []
        for layer in self.gat:
            if return_attention:
                x, a = layer(x, self.edges, return_attention=True)
                attn.append(a)
            else:
                x = layer(x, self.edges)
        return (x, attn) if return_attention else x

    def forward(self) -> RoadStateField:
        s_bar = self.encode_graph()
        omega = self.head_o(s_bar) * self.omega_scale
        if not self.use_time:
            omega = torch.zeros_like(omega)
        return RoadStateField(self.head_s(s_bar), omega, self.b)


def road_state(field: RoadStateField, seg: int, minutes: float) -> torch.Tensor:
    n = field.S_hat.shape[0]
    if not 0 <= seg < n:
        raise IndexError(f"segment index {seg} outside [0, {n})")
    t = torch.as_tensor(minutes, dtype=field.S_hat.dtype)
    return time2vec(t, field.Omega[seg], field.b) + field.S_hat[seg]
