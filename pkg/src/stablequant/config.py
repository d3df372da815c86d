"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must be a known
field; values are parsed according to the field type and the whole
config is validated before any computation starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .layers import RESIDUAL_KINDS, BlockSpec, image_trunk_specs
from .training import TrainConfig

SEED_ENV = "STABLEQUANT_SEED"
ARCHS = RESIDUAL_KINDS + ("gcn_sym", "gcn_nonsym")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "image"
    arch: str = "sym_res"
    depth: int = 6
    base: int = 8
    h: float = 0.5
    bits_w: int = 4
    bits_a: int = 4
    tv_enabled: bool = False
    tv_gamma_init: float = 0.01
    quantize: bool = True
    # training
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    bits_start: int = 16
    bits_decrement: int = 1
    bits_period: int = 10
    tv_lambda: float = 0.0
    val_fraction: float = 0.1
    spectral_projection: bool = False
    # data
    data_kind: str = "textures"
    data_size: int = 1024
    test_size: int = 256
    num_classes: int = 4
    channels: int = 1
    image_size: int = 16
    noise: float = 0.5
    data_seed: int = 0
    graph_nodes: int = 200
    graph_blocks: int = 4
    p_in: float = 0.1
    p_out: float = 0.01
    graph_features: int = 16
    feature_noise: float = 0.3
    train_per_class: int = 20

    def validate(self) -> None:
        if self.task not in ("image", "graph"):
            raise ConfigError(f"task must be image or graph, got {self.task!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        graph_arch = self.arch.startswith("gcn")
        if graph_arch != (self.task == "graph"):
            raise ConfigError(f"arch {self.arch!r} does not fit task {self.task!r}")
        if self.depth < 1 or self.base < 1:
            raise ConfigError("depth and base must be positive")
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if self.bits_w < 2 or self.bits_a < 2:
            raise ConfigError("bit widths must be >= 2")
        if self.data_size < 1 or self.test_size < 0:
            raise ConfigError("dataset sizes must be positive")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, momentum=self.momentum,
                           batch_size=self.batch_size, seed=self.seed, bits_start=self.bits_start,
                           bits_decrement=self.bits_decrement, bits_period=self.bits_period,
                           bits_target=min(self.bits_w, self.bits_a), tv_lambda=self.tv_lambda,
                           val_fraction=self.val_fraction,
                           spectral_projection=self.spectral_projection)

    def specs(self) -> list[BlockSpec]:
        if self.task == "graph":
            from .graph import gcn_specs

            return gcn_specs(self.arch, self.depth, self.graph_features, self.base,
                             self.graph_blocks, self.h, self.bits_w, self.bits_a, self.quantize)
        return image_trunk_specs(self.arch, self.depth, self.channels, self.base, self.num_classes,
                                 self.h, self.bits_w, self.bits_a, self.tv_enabled,
                                 self.tv_gamma_init, self.quantize)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def apply_overrides(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply ``key=value`` strings; unknown keys raise :class:`ConfigError`."""
    updates = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates)


def parse_config(text: str) -> ExperimentConfig:
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        items.append(line)
    return apply_overrides(ExperimentConfig(), items)


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Read a config file (optional), apply overrides and the seed variable, validate."""
    cfg = parse_config(Path(path).read_text()) if path else ExperimentConfig()
    cfg = apply_overrides(cfg, overrides)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg = apply_overrides(cfg, [f"seed={env[SEED_ENV]}"])
    cfg.validate()
    return cfg
