"""Time-aware Transformer whose keys follow closed-form continuous-time dynamics.

Each key K_j is treated as the initial state of a CfC cell started at its own
timestamp and is evolved in closed form to every query timestamp before the
dot product is taken.  Times entering this module are expected in units of the
target sampling interval; only differences matter.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

LECUN_SCALE = 1.7159
LECUN_SLOPE = 2.0 / 3.0
MAX_MATERIALIZED = 64


def lecun_tanh(x: torch.Tensor) -> torch.Tensor:
    return LECUN_SCALE * torch.tanh(LECUN_SLOPE * x)


class CfC(nn.Module):
    """Closed-form key dynamics on the per-head dimension.

    ``mode="identity"`` replaces the two target maps by the identity, which
    makes every key a fixed point: attention then reduces to the vanilla form
    regardless of timestamps.
    """

    def __init__(self, d_h: int, mode: str = "ted"):
        super().__init__()
        if mode not in ("ted", "identity"):
            raise ValueError(f"unknown CfC mode {mode!r}")
        self.mode = mode
        self.xi1 = nn.Linear(d_h, d_h)
        self.xi2 = nn.Linear(d_h, d_h)
        self.xi3 = nn.Linear(d_h, d_h)

    def maps(self, k0: torch.Tensor):
        """(time-constant, start target, end target) for initial states ``k0``."""
        x1 = lecun_tanh(self.xi1(k0))
        if self.mode == "identity":
            return x1, k0, k0
        return x1, lecun_tanh(self.xi2(k0)), lecun_tanh(self.xi3(k0))

    def forward(self, k0: torch.Tensor, dt: torch.Tensor) -> torch.Tensor:
        x1, x2, x3 = self.maps(k0)
        gate = torch.sigmoid(-x1 * dt)
        return gate * x2 + (1 - gate) * x3


def cfc_evolve(cfc: CfC, k0: torch.Tensor, dt) -> torch.Tensor:
    dt = torch.as_tensor(dt, dtype=k0.dtype)
    if dt.dim() < k0.dim():
        dt = dt.unsqueeze(-1)
    return cfc(k0, dt)


def st_key_matrix(K: torch.Tensor, t_q: torch.Tensor, t_k: torch.Tensor, cfc: CfC) -> torch.Tensor:
    """Keys evolved to every query time.

    ``K`` is (..., l_k, d_h), ``t_q`` (..., l_q), ``t_k`` (..., l_k);
    returns (..., l_q, l_k, d_h) with entry (i, j) = key j at time t_q[i].
    """
    if K.shape[-2] != t_k.shape[-1]:
        raise ValueError(f"{K.shape[-2]} keys but {t_k.shape[-1]} key timestamps")
    x1, x2, x3 = cfc.maps(K)
    dt = (t_q.unsqueeze(-1) - t_k.unsqueeze(-2)).unsqueeze(-1)    # (..., l_q, l_k, 1)
    gate = torch.sigmoid(-x1.unsqueeze(-3) * dt)
    return gate * x2.unsqueeze(-3) + (1 - gate) * x3.unsqueeze(-3)


def ted_attention_scores(Q: torch.Tensor, K: torch.Tensor, t_q: torch.Tensor, t_k: torch.Tensor,
                         cfc: CfC, chunk: int | None = None) -> torch.Tensor:
    """Unscaled time-aware scores, (..., l_q, l_k).

    Query rows are processed in blocks of ``chunk`` (default: stream whenever
    l_q exceeds 64) so the full l_q x l_k x d_h key tensor is never held.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if Q.shape[-2] != t_q.shape[-1]:
        raise ValueError(f"{Q.shape[-2]} queries but {t_q.shape[-1]} query timestamps")
    if K.shape[-2] != t_k.shape[-1]:
        raise ValueError(f"{K.shape[-2]} keys but {t_k.shape[-1]} key timestamps")
    x1, x2, x3 = cfc.maps(K)
    delta = (x2 - x3).unsqueeze(-3)
    base = Q @ x3.transpose(-1, -2)                       # Q_i . x3_j
    l_q = Q.shape[-2]
    if chunk is None:
        chunk = l_q if l_q <= MAX_MATERIALIZED else MAX_MATERIALIZED
    parts = []
    for s in range(0, l_q, chunk):
        q = Q[..., s:s + chunk, :]
        dt = (t_q[..., s:s + chunk].unsqueeze(-1) - t_k.unsqueeze(-2)).unsqueeze(-1)
        gate = torch.sigmoid(-x1.unsqueeze(-3) * dt)
        parts.append((q.unsqueeze(-2) * gate * delta).sum(-1))
    return base + torch.cat(parts, dim=-2)


class TimeAwareMHA(nn.Module):
    """Multi-head attention with CfC-evolved keys; one CfC shared by all heads."""

    def __init__(self, d: int, heads: int, cfc_mode: str = "ted"):
        super().__init__()
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide d ({d})")
        self.d, self.heads, self.d_h = d, heads, d // heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)
        self.cfc = CfC(self.d_h, cfc_mode)

    def _split(self, x):
        return x.view(*x.shape[:-1], self.heads, self.d_h).transpose(-2, -3)

    def forward(self, q_in, k_in, v_in, t_q, t_k, key_mask=None, return_attention=False):
        """Inputs (B, l, d), times (B, l); ``key_mask`` (B, l_k) is True on real keys."""
        if q_in.shape[-1] != self.d or k_in.shape[-1] != self.d or v_in.shape[-1] != self.d:
            raise ValueError("feature dimension mismatch")
        if k_in.shape[-2] != v_in.shape[-2]:
            raise ValueError("keys and values differ in length")
        q, k, v = self._split(self.w_q(q_in)), self._split(self.w_k(k_in)), self._split(self.w_v(v_in))
        scores = ted_attention_scores(q, k, t_q.unsqueeze(-2), t_k.unsqueeze(-2), self.cfc)
        scores = scores / math.sqrt(self.d_h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[..., None, None, :], -math.inf)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(-2, -3).reshape(*q_in.shape[:-1], self.d)
        out = self.w_o(out)
        return (out, attn) if return_attention else out


class TedFormerLayer(nn.Module):
    """Post-norm layer: attention + residual + LayerNorm, FFN + residual + LayerNorm.

    Called with ``memory`` it cross-attends to it (decoder); otherwise it
    self-attends (encoder).
    """

    def __init__(self, d: int, heads: int, d_ff: int | None = None, cfc_mode: str = "ted",
                 ln_eps: float = 1e-6):
        super().__init__()
        d_ff = d_ff or 2 * d
        if d_ff < d:
            raise ValueError("d_ff must be at least d")
        self.attn = TimeAwareMHA(d, heads, cfc_mode)
        self.ffn = nn.Sequential(nn.Linear(d, d_ff), nn.ReLU(), nn.Linear(d_ff, d))
        self.norm1 = nn.LayerNorm(d, eps=ln_eps)
        self.norm2 = nn.LayerNorm(d, eps=ln_eps)

    def forward(self, x, t_x, memory=None, t_mem=None, mem_mask=None):
        if memory is None:
            memory, t_mem = x, t_x
        elif memory.shape[-2] == 0:
            raise ValueError("decoder memory is empty")
        h = self.norm1(self.attn(x, memory, memory, t_x, t_mem, mem_mask) + x)
        return self.norm2(self.ffn(h) + h)


def encoder_layer(layer: TedFormerLayer, h_prev, t, mask=None):
    return layer(h_prev, t, mem_mask=mask)


def decoder_layer(layer: TedFormerLayer, x, memory, t_x, t_mem, mem_mask=None):
    return layer(x, t_x, memory, t_mem, mem_mask)


def positional_encoding(m: int, d: int, dtype=torch.float32) -> torch.Tensor:
    if m < 1 or d < 1:
        raise ValueError("positional encoding needs m, d >= 1")
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = torch.arange(m, dtype=torch.float64).unsqueeze(1)
    freq = torch.pow(10000.0, -torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(m, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)

