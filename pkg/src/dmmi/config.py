"""Run configuration loaded from / saved to JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .synthetic import DatasetConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    image_size: int = 64
    max_len: int = 20
    text_dim: int = 64
    attn_dim: list = field(default_factory=lambda: [64, 64, 64, 64])
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    stem_channels: int = 16
    stem_stride: int = 1
    decoder_dims: list = field(default_factory=lambda: [64, 32])
    embed_dim: int = 64
    text_layers: int = 2
    region_sizes: list = field(default_factory=lambda: [1, 3, 5])
    run_lengths: list = field(default_factory=lambda: [1, 2, 3])
    heads: int = 8
    tau: float = 0.05
    lr0: float = 5e-5
    weight_decay: float = 0.01
    poly_power: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    total_steps: int = 5000
    batch_size: int = 16
    seed: int = 0
    use_sim: bool = True
    use_con: bool = True
    log_every: int = 1
    checkpoint_every: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    data: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self):
        positive = ["image_size", "max_len", "text_dim", "stem_channels", "embed_dim",
                    "text_layers", "heads", "tau", "lr0", "poly_power", "eps",
                    "total_steps", "batch_size", "log_every"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be non-negative")
        for name in ("attn_dim", "channels", "decoder_dims", "region_sizes", "run_lengths"):
            vals = getattr(self, name)
            if not vals or any(not isinstance(v, int) or v <= 0 for v in vals):
                raise ConfigError(f"{name}: must be a list of positive integers")
        if len(self.channels) != 4 or len(self.attn_dim) != 4:
            raise ConfigError("channels/attn_dim: exactly four stages required")
        if len(self.decoder_dims) != 2:
            raise ConfigError("decoder_dims: exactly two decoder stages required")
        if any(r % 2 == 0 for r in self.region_sizes):
            raise ConfigError("region_sizes: window extents must be odd")
        for name in ("text_dim", "decoder_dims"):
            dims = getattr(self, name)
            for d in (dims if isinstance(dims, list) else [dims]):
                if d % self.heads:
                    raise ConfigError(f"{name}: {d} not divisible by heads={self.heads}")
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride: must be 1 or 2")
        if self.image_size % (16 * self.stem_stride):
            raise ConfigError(f"image_size: must be a multiple of {16 * self.stem_stride}")
        if tuple(self.data.image_size) != (self.image_size, self.image_size):
            raise ConfigError("data.image_size: must match image_size")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["grid"] = list(self.data.grid)
        d["data"]["image_size"] = list(self.data.image_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        data = d.pop("data", {})
        if "image_size" in d and "image_size" not in data:
            data = {**data, "image_size": [d["image_size"], d["image_size"]]}
        try:
            data_cfg = DatasetConfig.from_dict(data)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data: {e}") from e
        try:
            cfg = cls(**d, data=data_cfg)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(d)


def tiny_config(**overrides) -> RunConfig:
    """A very small model for gradient checks and fast tests."""
    base = dict(image_size=16, max_len=6, text_dim=16, attn_dim=[8, 8, 8, 8],
                channels=[8, 8, 16, 16], stem_channels=4, decoder_dims=[16, 8], embed_dim=8,
                text_layers=1, heads=8, total_steps=10, batch_size=2,
                data={"n_train": 8, "n_test": 4, "image_size": [16, 16], "grid": [2, 2],
                      "min_objects": 1, "max_objects": 4, "min_size": 4, "max_size": 8})
    base.update(overrides)
    return RunConfig.from_dict(base)


def acceptance_config(**overrides) -> RunConfig:
    """Default model with the desk-scale training recipe used for the learning checks.

    The model is trained from scratch, so the learning rate is well above the
    fine-tuning value of the defaults. 4000 training scenes, 4500 steps of 16.
    """
    base = dict(lr0=1e-3, total_steps=4500, batch_size=16, data={"n_train": 4000})
    base.update(overrides)
    return RunConfig.from_dict(base)
