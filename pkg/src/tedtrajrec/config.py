"""Flat run configuration: defaults < JSON file < ``--set key=value`` flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .model import ModelConfig
from .training import TrainConfig
from .trajectory_data import HMMConfig, SynthParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: str = "network.csv"
    raw: str = "raw.jsonl"
    data_dir: str = "data"
    out_dir: str = "runs"
    # model
    d: int = 256
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 1
    gat_layers: int = 2
    gat_heads: int = 4
    d_ff: int = 0                # 0 -> 2 * d
    attention: str = "ted"
    use_time: bool = True
    # features / mask
    eta: float = 400.0
    gamma: float = 30.0
    r_mask: float = 100.0
    # data
    eps_tau: float = 15.0
    keep_prob: float = 0.125
    hmm_sigma: float = 20.0
    hmm_beta: float = 5.0
    hmm_radius: float = 100.0
    # training
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    tf_ratio: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0
    # synthetic generation
    synth_count: int = 200
    synth_rows: int = 4
    synth_cols: int = 4
    synth_spacing: float = 300.0
    synth_noise: float = 5.0
    synth_min_points: int = 20
    synth_max_points: int = 30
    synth_peak_factor: float = 2.5

    def validate(self):
        positive = ["d", "heads", "enc_layers", "dec_layers", "gat_layers", "gat_heads", "eta",
                    "gamma", "r_mask", "eps_tau", "keep_prob", "lr", "batch_size", "epochs",
                    "hmm_sigma", "hmm_beta", "hmm_radius", "synth_spacing"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads or self.d % self.gat_heads:
            raise ConfigError(f"d={self.d} must be divisible by heads and gat_heads")
        if self.keep_prob > 1:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if not 0 <= self.tf_ratio <= 1:
            raise ConfigError("tf_ratio must lie in [0, 1]")
        if self.attention not in ("ted", "full"):
            raise ConfigError("attention must be 'ted' or 'full'")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, heads=self.heads, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, gat_layers=self.gat_layers,
                           gat_heads=self.gat_heads, d_ff=self.d_ff or None, eta=self.eta,
                           gamma=self.gamma, r_mask=self.r_mask, eps_tau=self.eps_tau,
                           attention=self.attention, use_time=self.use_time)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lam=self.lam, tf_ratio=self.tf_ratio, clip_norm=self.clip_norm,
                           seed=self.seed)

    def hmm_config(self) -> HMMConfig:
        return HMMConfig(self.hmm_sigma, self.hmm_beta, self.hmm_radius)

    def synth_params(self) -> SynthParams:
        return SynthParams(eps_tau=self.eps_tau, min_points=self.synth_min_points,
                           max_points=self.synth_max_points, peak_factor=self.synth_peak_factor)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _coerce(name: str, typ, value: str):
    if typ in (bool, "bool"):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    conv = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def load_config(path: str | None = None, overrides: list[str] | None = None, **flags) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        unknown = set(data) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, types[key], val)
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values).validate()
