"""Experiment configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .synthdata import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "posterior"


@dataclass
class A2LConfig:
    hidden_dim: int = 256  # >= 3 L for L = 68
    n_blocks: int = 12
    window: int = 20
    kernel_size: int = 3
    temporal_unit: bool = True
    mapping_unit: bool = True
    residual: bool = True
    objective: str = "diffusion"
    loss: str = "l2"
    learning_rate: float = 1e-4
    batch_size: int = 16
    sample_stride: int = 1


@dataclass
class L2IConfig:
    base_width: int = 64  # >= latent channels (48 at f = 4)
    factor: int = 4
    pos_emb: bool = True
    codec: str = "fixed"
    drop_conditions: list = field(default_factory=list)
    tau: int = 20
    mask_margin: int = 2
    loss: str = "l2"
    learning_rate: float = 1e-4
    batch_size: int = 16
    sample_stride: int = 1
    clip_denoised: bool = True


@dataclass
class TrainConfig:
    steps: int = 2000
    checkpoint_every: int = 500
    log_every: int = 10
    train_a2l: bool = True
    train_l2i: bool = True


@dataclass
class InferConfig:
    overlap: int = -1  # -1: window // 4
    batch_frames: int = 16


@dataclass
class EvalConfig:
    ablations: list = field(default_factory=lambda: ["full"])
    max_frames: int = 0  # 0: all frames
    include_ground_truth: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    train_data: str = ""
    test_data: str = ""
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    a2l: A2LConfig = field(default_factory=A2LConfig)
    l2i: L2IConfig = field(default_factory=L2IConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def merge_overrides(cfg: ExperimentConfig, overrides: dict):
    """Apply dotted-key overrides such as ``{"train.steps": 10}``."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"unknown override {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown override {key!r}")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)
