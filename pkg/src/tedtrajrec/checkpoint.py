"""Single-file checkpoint format.

Layout (little-endian)::

    magic        8 bytes  b"TEDTRJCK"
    version      u32
    d, H, M, N, |V|   5 x u32
    meta_len     u32, followed by meta_len bytes of UTF-8 JSON
                 (full model config, segment ids, epoch)
    n_blobs      u32
    per blob:    u16 name_len, name, u8 ndim, ndim x u32 shape,
                 prod(shape) x float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .model import ModelConfig, TedTrajRec
from .road_network import RoadNetwork

MAGIC = b"TEDTRJCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TedTrajRec, net: RoadNetwork, path, epoch: int = 0) -> None:
    cfg = model.cfg
    meta = json.dumps({"config": asdict(cfg), "segment_ids": net.ids, "epoch": epoch}).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, cfg.d, cfg.heads, cfg.enc_layers,
                             cfg.dec_layers, len(net)))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def load_checkpoint(path, net: RoadNetwork) -> tuple[TedTrajRec, dict]:
    """Rebuild the model saved at ``path``; returns (model, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a TedTrajRec checkpoint")
        version, d, heads, m, n, v = _read(fh, "<6I")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
        (meta_len,) = _read(fh, "<I")
        meta = json.loads(fh.read(meta_len).decode())
        if v != len(net) or meta["segment_ids"] != net.ids:
            raise CheckpointError(f"{path}: checkpoint was trained on a different road network")
        cfg = ModelConfig(**meta["config"])
        if (cfg.d, cfg.heads, cfg.enc_layers, cfg.dec_layers) != (d, heads, m, n):
            raise CheckpointError(f"{path}: header disagrees with stored config")
        (count,) = _read(fh, "<I")
        state = {}
        for _ in range(count):
            (name_len,) = _read(fh, "<H")
            name = fh.read(name_len).decode()
            (ndim,) = _read(fh, "<B")
            shape = _read(fh, f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            buf = fh.read(4 * size)
            if len(buf) != 4 * size:
                raise CheckpointError("truncated checkpoint")
            state[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    model = TedTrajRec(net, cfg)
    model.load_state_dict(state)
    return model, meta
