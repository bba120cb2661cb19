"""Run configuration: one dataclass per section, loaded from JSON.

Keys are addressed as ``section.field`` (e.g. ``pdn.eta``) both in the
JSON file and in command-line overrides. A file may name a base file under
``"extends"`` (resolved relative to itself) and list only what differs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class SsnConfig:
    L: int = 3
    C_in: int = 16
    C_hidden: int = 256
    dilations: list[int] = field(default_factory=lambda: [1, 10, 20, 30])
    K_s: int = 8
    D: int = 3
    T: int = 1000
    use_gc: bool = True
    use_ac: bool = True
    use_gp: bool = True
    seg_mode: str = "multiclass"

    def validate(self) -> None:
        if self.L < 1:
            raise ConfigError("ssn.L must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError("ssn.dilations must be non-empty and positive")
        if self.K_s < 1:
            raise ConfigError("ssn.K_s must be >= 1")
        if self.D < 1 or self.C_in < 1 or self.C_hidden < 1:
            raise ConfigError("ssn.D, ssn.C_in and ssn.C_hidden must be >= 1")
        if self.T % (2**self.L):
            raise ConfigError(f"ssn.T={self.T} must be divisible by 2^L={2**self.L}")
        if self.seg_mode not in ("multiclass", "binary"):
            raise ConfigError("ssn.seg_mode must be 'multiclass' or 'binary'")
        if not (self.use_gc or self.use_ac or self.use_gp):
            raise ConfigError("at least one PAG branch must be enabled")


@dataclass
class PdnConfig:
    eta: int = 8
    m0: int = 50
    k: int = 4
    theta_p: float = 0.1
    align_bins: int = 32
    edge_mode: str = "tiou"
    layer_mode: str = "graph"
    center_threshold: float = 8.0
    tau: float = 0.5
    layers: int = 3

    def validate(self) -> None:
        if self.eta < 1 or self.m0 < 2 or self.k < 1 or self.align_bins < 1 or self.layers < 1:
            raise ConfigError("pdn.eta, pdn.k, pdn.align_bins, pdn.layers must be >= 1 and pdn.m0 >= 2")
        if self.edge_mode not in ("tiou", "center_distance"):
            raise ConfigError("pdn.edge_mode must be 'tiou' or 'center_distance'")
        if self.layer_mode not in ("graph", "conv1x1"):
            raise ConfigError("pdn.layer_mode must be 'graph' or 'conv1x1'")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_drop_epoch: int = 7
    epochs: int = 15
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1e-4
    use_seg_loss: bool = True
    seed: int = 0
    batch: int = 1
    shuffle: bool = True
    save_every: int = 1

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("train.epochs and train.batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")


@dataclass
class InferConfig:
    sigma: float = 0.5
    keep: int = 100
    top_classes: int = 1

    def validate(self) -> None:
        if self.sigma <= 0 or self.keep < 1 or self.top_classes < 1:
            raise ConfigError("infer.sigma must be > 0, infer.keep and infer.top_classes >= 1")


@dataclass
class Config:
    ssn: SsnConfig = field(default_factory=SsnConfig)
    pdn: PdnConfig = field(default_factory=PdnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self) -> Config:
        for section in (self.ssn, self.pdn, self.train, self.infer):
            section.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Config:
        cfg = cls()
        for section, values in raw.items():
            if not hasattr(cfg, section):
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    def set(self, dotted: str, value: Any) -> None:
        section_name, _, key = dotted.partition(".")
        section = getattr(self, section_name, None)
        if section is None or not key or key not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(section, key)
        if isinstance(value, str) and not isinstance(current, str):
            value = json.loads(value)
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, list):
            value = [int(v) for v in value]
        setattr(section, key, value)


def _read_layers(path: Path, seen: tuple[Path, ...] = ()) -> list[dict[str, Any]]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"config {path} extends itself")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    base = raw.pop("extends", None)
    layers = _read_layers(path.parent / base, seen + (path,)) if base else []
    return layers + [raw]


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Load JSON config (following ``extends``), apply ``key=value`` overrides, then ``SEGTAD_SEED``."""
    cfg = Config()
    for layer in _read_layers(Path(path)) if path else []:
        for section, values in layer.items():
            if not hasattr(cfg, section) or not isinstance(values, dict):
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        cfg.set(key.strip(), value.strip())
    seed = os.environ.get("SEGTAD_SEED")
    if seed is not None:
        cfg.train.seed = int(seed)
    return cfg.validate()
