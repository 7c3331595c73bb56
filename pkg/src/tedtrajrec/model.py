"""Sequence-to-sequence recovery model.

Sparse GPS points are encoded by STTExtractor features and TedFormer encoder
layers; an autoregressive cross-attention decoder then emits one
(segment, ratio) pair per step of the target time grid, with segment
probabilities gated by a constraint mask around observed points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .pd_gnn import PDGNN, MINUTES_PER_DAY, RoadStateField
from .road_network import RoadNetwork
from .tedformer import TedFormerLayer, positional_encoding
from .traj_features import minute_of_day, mix_states, subregion_weights
from .trajectory_data import MapTrajectory, RawTrajectory, TrajectoryError, grid_times


@dataclass
class ModelConfig:
    d: int = 256
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 1
    gat_layers: int = 2
    gat_heads: int = 4
    d_ff: int | None = None
    eta: float = 400.0
    gamma: float = 30.0
    r_mask: float = 100.0
    eps_tau: float = 15.0
    attention: str = "ted"          # "ted" or "full"
    use_time: bool = True
    omega_scale: float = 2 * math.pi / MINUTES_PER_DAY

    def validate(self):
        if self.d % self.heads or self.d % self.gat_heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads} and gat_heads={self.gat_heads}")
        if self.d % 2:
            raise ValueError("d must be even for the positional encoding")
        if self.attention not in ("ted", "full"):
            raise ValueError(f"attention must be 'ted' or 'full', got {self.attention!r}")
        for name in ("eta", "gamma", "r_mask", "eps_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.enc_layers, self.dec_layers, self.gat_layers) < 1:
            raise ValueError("layer counts must be >= 1")
        return self


# -- per-trajectory preparation ------------------------------------------

def make_decode_grid(raw: RawTrajectory, eps_tau: float) -> list[float]:
    t1, tm = raw.points[0][2], raw.points[-1][2]
    if tm <= t1:
        raise TrajectoryError(f"trajectory {raw.id}: last timestamp must follow the first")
    return grid_times(t1, tm, eps_tau)


@dataclass
class ConstraintMask:
    C: np.ndarray            # (n, |V|)
    t_de: list[float]
    observed: np.ndarray     # (n,) bool

    @property
    def log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.C)


def build_constraint_mask(net: RoadNetwork, raw: RawTrajectory, t_de: Sequence[float],
                          r_mask: float, gamma: float) -> ConstraintMask:
    """Gaussian prior around observed points; rows of ones at unobserved steps."""
    if not (r_mask > 0 and gamma > 0):
        raise ValueError("r_mask and gamma must be positive")
    n = len(t_de)
    eps = t_de[1] - t_de[0] if n > 1 else math.inf
    C = np.ones((n, len(net)))
    observed = np.zeros(n, dtype=bool)
    times = np.array(raw.times)
    for i, t in enumerate(t_de):
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > eps / 2 + 1e-9:
            continue
        found = net.segment_distances(raw.points[k][:2], r_mask)
        if not found:
            continue
        row = np.zeros(len(net))
        for sid, (d, _) in found.items():
            row[net.index[sid]] = math.exp(-(d / gamma) ** 2)
        if row.max() > 0:
            C[i] = row
            observed[i] = True
    return ConstraintMask(C, list(t_de), observed)


@dataclass
class Sample:
    id: str
    en_pos: np.ndarray
    en_w: np.ndarray
    en_min: np.ndarray
    en_t: np.ndarray
    de_t: np.ndarray
    de_min: np.ndarray
    log_mask: np.ndarray
    grid: list[float]
    tgt_seg: np.ndarray | None = None
    tgt_ratio: np.ndarray | None = None


def prepare_sample(net: RoadNetwork, raw: RawTrajectory, cfg: ModelConfig,
                   target: MapTrajectory | None = None) -> Sample:
    subs = [subregion_weights(net, (lon, lat), cfg.eta, cfg.gamma) for lon, lat, _ in raw.points]
    k = max(len(s.positions) for s in subs)
    m = len(subs)
    en_pos = np.zeros((m, k), dtype=np.int64)
    en_w = np.zeros((m, k))
    for i, s in enumerate(subs):
        en_pos[i, :len(s.positions)] = s.positions
        en_w[i, :len(s.weights)] = s.weights
    t0 = raw.points[0][2]
    grid = make_decode_grid(raw, cfg.eps_tau)
    mask = build_constraint_mask(net, raw, grid, cfg.r_mask, cfg.gamma)
    sample = Sample(
        raw.id, en_pos, en_w,
        np.array([minute_of_day(t) for t in raw.times]),
        (np.array(raw.times) - t0) / cfg.eps_tau,
        (np.array(grid) - t0) / cfg.eps_tau,
        np.array([minute_of_day(t) for t in grid]),
        mask.log, grid,
    )
    if target is not None:
        if len(target.points) != len(grid):
            raise TrajectoryError(
                f"trajectory {raw.id}: target has {len(target.points)} points, grid has {len(grid)}")
        seg = np.array([net.index[s] for s in target.segments])
        miss = ~np.isfinite(sample.log_mask[np.arange(len(grid)), seg])
        sample.log_mask[miss] = 0.0
        sample.tgt_seg = seg
        sample.tgt_ratio = np.array(target.ratios)
    return sample


@dataclass
class Batch:
    ids: list[str]
    en_pos: torch.Tensor     # (B, m, K)
    en_w: torch.Tensor
    en_min: torch.Tensor     # (B, m)
    en_t: torch.Tensor
    en_mask: torch.Tensor    # (B, m) bool
    de_t: torch.Tensor       # (B, n)
    de_min: torch.Tensor
    de_mask: torch.Tensor    # (B, n) bool
    log_mask: torch.Tensor   # (B, n, |V|)
    tgt_seg: torch.Tensor | None = None
    tgt_ratio: torch.Tensor | None = None


def collate(samples: Sequence[Sample], dtype=torch.float32) -> Batch:
    b = len(samples)
    m = max(len(s.en_t) for s in samples)
    k = max(s.en_pos.shape[1] for s in samples)
    n = max(len(s.de_t) for s in samples)
    v = samples[0].log_mask.shape[1]
    en_pos = np.zeros((b, m, k), dtype=np.int64)
    en_w = np.zeros((b, m, k))
    en_min = np.zeros((b, m))
    en_t = np.zeros((b, m))
    en_mask = np.zeros((b, m), dtype=bool)
    de_t = np.zeros((b, n))
    de_min = np.zeros((b, n))
    de_mask = np.zeros((b, n), dtype=bool)
    log_mask = np.zeros((b, n, v))
    has_tgt = all(s.tgt_seg is not None for s in samples)
    tgt_seg = np.zeros((b, n), dtype=np.int64)
    tgt_ratio = np.zeros((b, n))
    for i, s in enumerate(samples):
        mi, ki, ni = s.en_pos.shape[0], s.en_pos.shape[1], len(s.de_t)
        en_pos[i, :mi, :ki] = s.en_pos
        en_w[i, :mi, :ki] = s.en_w
        en_min[i, :mi] = s.en_min
        en_t[i, :mi] = s.en_t
        en_mask[i, :mi] = True
        de_t[i, :ni] = s.de_t
        de_t[i, ni:] = s.de_t[-1]
        de_min[i, :ni] = s.de_min
        de_mask[i, :ni] = True
        log_mask[i, :ni] = s.log_mask
        if has_tgt:
            tgt_seg[i, :ni] = s.tgt_seg
            tgt_ratio[i, :ni] = s.tgt_ratio
    f = lambda a: torch.as_tensor(a, dtype=dtype)
    return Batch(
        [s.id for s in samples], torch.as_tensor(en_pos), f(en_w), f(en_min), f(en_t),
        torch.as_tensor(en_mask), f(de_t), f(de_min), torch.as_tensor(de_mask), f(log_mask),
        torch.as_tensor(tgt_seg) if has_tgt else None, f(tgt_ratio) if has_tgt else None,
    )


# -- heads ------------------------------------------------------------------

def predict_segment(h: torch.Tensor, mask_row: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Masked softmax over segments: exp(h.w_j) C_j / sum_e exp(h.w_e) C_e."""
    if not (mask_row > 0).any():
        raise ValueError("constraint mask row has no positive entry")
    logits = h @ w.T
    return torch.softmax(logits + torch.log(mask_row), dim=-1)


class RatioHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * d, d), nn.ReLU(), nn.Linear(d, 1))

    def forward(self, h, seg_state):
        return torch.sigmoid(self.net(torch.cat([h, seg_state], dim=-1))).squeeze(-1)


def predict_ratio(h: torch.Tensor, seg_state: torch.Tensor, head: RatioHead) -> torch.Tensor:
    return head(h, seg_state).clamp(0.0, 1.0)


def embed_prediction(seg, ratio, h, field: RoadStateField, minutes, emb: nn.Linear) -> torch.Tensor:
    """[state of seg at minutes || ratio || h] W_emb + b_emb."""
    seg = torch.as_tensor(seg)
    n = field.S_hat.shape[0]
    if ((seg < 0) | (seg >= n)).any():
        raise IndexError(f"segment index outside [0, {n})")
    minutes = torch.as_tensor(minutes, dtype=h.dtype)
    ratio = torch.as_tensor(ratio, dtype=h.dtype)
    state = field.state(seg, minutes)
    return emb(torch.cat([state, ratio.unsqueeze(-1), h], dim=-1))


@dataclass
class RecoveryOutput:
    log_probs: torch.Tensor     # (B, n, |V|) masked log-distributions
    ratios: torch.Tensor        # (B, n)
    segments: torch.Tensor      # (B, n) argmax dense indices
    step_mask: torch.Tensor     # (B, n)

    @property
    def probs(self):
        return self.log_probs.exp()


class TedTrajRec(nn.Module):
    def __init__(self, net: RoadNetwork, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_segments = len(net)
        d = cfg.d
        cfc_mode = "ted" if cfg.attention == "ted" else "identity"
        self.pdgnn = PDGNN(len(net), d, cfg.gat_layers, cfg.gat_heads, cfg.omega_scale,
                           cfg.use_time).set_network(net)
        self.encoder = nn.ModuleList(TedFormerLayer(d, cfg.heads, cfg.d_ff, cfc_mode)
                                     for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(TedFormerLayer(d, cfg.heads, cfg.d_ff, cfc_mode)
                                     for _ in range(cfg.dec_layers))
        self.w = nn.Parameter(torch.randn(len(net), d) / math.sqrt(d))
        self.ratio_head = RatioHead(d)
        self.emb = nn.Linear(2 * d + 1, d)

    def road_field(self) -> RoadStateField:
        return self.pdgnn()

    def features(self, batch: Batch, field: RoadStateField) -> torch.Tensor:
        return mix_states(field, batch.en_pos, batch.en_w, batch.en_min)

    def encode(self, batch: Batch, field: RoadStateField) -> torch.Tensor:
        x = self.features(batch, field)
        x = x + positional_encoding(x.shape[1], self.cfg.d, x.dtype)
        for layer in self.encoder:
            x = layer(x, batch.en_t, mem_mask=batch.en_mask)
        return x

    @staticmethod
    def init_state(memory: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if memory.shape[-2] == 0:
            raise ValueError("encoder memory is empty")
        if mask is None:
            return memory.mean(-2, keepdim=True)
        m = mask.to(memory.dtype).unsqueeze(-1)
        return (memory * m).sum(-2, keepdim=True) / m.sum(-2, keepdim=True)

    def decode_step(self, state, memory, batch, i):
        h = state
        for layer in self.decoder:
            h = layer(h, batch.de_t[:, i:i + 1], memory, batch.en_t, batch.en_mask)
        return h.squeeze(1)

    def decode(self, field: RoadStateField, memory: torch.Tensor, batch: Batch,
               teacher: bool = False, tf_ratio: float = 0.5,
               generator: torch.Generator | None = None) -> RecoveryOutput:
        """Greedy decoding; with ``teacher`` the ground truth replaces the model's
        own previous output with probability ``tf_ratio`` per step."""
        if teacher and batch.tgt_seg is None:
            raise ValueError("teacher forcing needs targets")
        state = self.init_state(memory, batch.en_mask)
        n = batch.de_t.shape[1]
        logps, ratios, preds = [], [], []
        for i in range(n):
            h = self.decode_step(state, memory, batch, i)
            logp = torch.log_softmax(h @ self.w.T + batch.log_mask[:, i], dim=-1)
            pred = logp.argmax(-1)
            minutes = batch.de_min[:, i]
            ratio_seg = batch.tgt_seg[:, i] if teacher else pred
            r = self.ratio_head(h, field.state(ratio_seg, minutes))
            if teacher:
                use = torch.rand(pred.shape[0], generator=generator) < tf_ratio
                e_in = torch.where(use, batch.tgt_seg[:, i], pred)
                r_in = torch.where(use, batch.tgt_ratio[:, i], r)
            else:
                e_in, r_in = pred, r
            state = embed_prediction(e_in, r_in, h, field, minutes, self.emb).unsqueeze(1)
            logps.append(logp)
            ratios.append(r)
            preds.append(pred)
        return RecoveryOutput(torch.stack(logps, 1), torch.stack(ratios, 1),
                              torch.stack(preds, 1), batch.de_mask)

    def forward(self, batch: Batch, teacher: bool = False, tf_ratio: float = 0.5,
                generator: torch.Generator | None = None) -> RecoveryOutput:
        field = self.road_field()
        memory = self.encode(batch, field)
        return self.decode(field, memory, batch, teacher, tf_ratio, generator)


# -- losses -----------------------------------------------------------------

@dataclass
class Losses:
    id: torch.Tensor
    ratio: torch.Tensor
    total: torch.Tensor


def compute_losses(out: RecoveryOutput, tgt_seg: torch.Tensor, tgt_ratio: torch.Tensor,
                   lam: float = 1.0) -> Losses:
    """Per-trajectory sums over decode steps, averaged over the batch."""
    if out.log_probs.shape[:2] != tgt_seg.shape:
        raise ValueError("prediction and target lengths differ")
    mask = out.step_mask.to(out.ratios.dtype)
    nll = -out.log_probs.gather(-1, tgt_seg.unsqueeze(-1)).squeeze(-1)
    nll = torch.where(out.step_mask, nll, torch.zeros_like(nll))
    l_id = nll.sum(1).mean()
    l_ratio = (((tgt_ratio - out.ratios) ** 2) * mask).sum(1).mean()
    return Losses(l_id, l_ratio, l_id + lam * l_ratio)


def to_map_trajectories(out: RecoveryOutput, batch: Batch, samples: Sequence[Sample],
                        net: RoadNetwork) -> list[MapTrajectory]:
    segs = out.segments.cpu().numpy()
    ratios = out.ratios.detach().clamp(0.0, 1.0).cpu().numpy()
    trajs = []
    for b, s in enumerate(samples):
        pts = [(net.ids[int(segs[b, i])], float(ratios[b, i]), t) for i, t in enumerate(s.grid)]
        trajs.append(MapTrajectory(s.id, pts))
    return trajs
