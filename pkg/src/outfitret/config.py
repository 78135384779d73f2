"""Hyperparameters for the retrieval head and the training loop.

Config files are flat JSON objects whose keys are the field names of
:class:`Hyperparams` and :class:`TrainConfig`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

LEVELS = ("item", "style", "outfit")


class ConfigError(ValueError):
    pass


@dataclass
class Hyperparams:
    """Model and loss settings shared by training and inference."""

    dim: int = 512
    heads: int = 8
    ffn_mult: int = 4
    depth: int = 1
    allow_depth_override: bool = False
    # logits = similarity * logit_scale ("scale"), or similarity / logit_scale ("divide")
    logit_scale: float = 100.0
    temperature_mode: str = "scale"
    p: float = 0.2
    alpha: float = 0.3
    beta: float = 0.3
    k_o: float = 1 / 3
    k_t: float = 1 / 6
    greedy_init: bool = True
    share_style_wti: bool = False
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    strict_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.depth != 1 and not self.allow_depth_override:
            raise ConfigError(f"encoders use exactly one transformer layer (depth={self.depth}); "
                              "set allow_depth_override to change it")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be > 0")
        if self.temperature_mode not in ("scale", "divide"):
            raise ConfigError(f"temperature_mode must be 'scale' or 'divide', got {self.temperature_mode!r}")
        if self.p < 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("p, alpha and beta must be non-negative")
        for name in ("k_o", "k_t"):
            k = getattr(self, name)
            if not 0 < k <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {k}")


PRESETS = {
    # full CLIP fine-tuning settings
    "paper": {"lr": 5e-7, "batch_size": 50, "epochs": 20},
    # head-only training over frozen embeddings
    "desk": {"lr": 1e-3, "batch_size": 50, "epochs": 20},
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 50
    epochs: int = 20
    levels: tuple[str, ...] = LEVELS
    drop_last: bool = True
    clip_norm: float | None = None
    checkpoint_every: int = 0
    reproducible: bool = True
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self.levels = tuple(self.levels)
        self.validate()

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        unknown = set(self.levels) - set(LEVELS)
        if unknown:
            raise ConfigError(f"unknown levels {sorted(unknown)}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        base.update(overrides)
        return cls.from_flat(base)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from a flat mapping, routing each key to the right dataclass."""
        hyper_fields = {f.name for f in dataclasses.fields(Hyperparams)}
        train_fields = {f.name for f in dataclasses.fields(cls)} - {"hyper"}
        hyper_kw, train_kw = {}, {}
        for key, value in flat.items():
            if key in train_fields:
                train_kw[key] = value
            elif key in hyper_fields:
                hyper_kw[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "seed" in train_kw and "seed" not in hyper_kw:
            hyper_kw["seed"] = train_kw["seed"]
        try:
            return cls(hyper=Hyperparams(**hyper_kw), **train_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_flat(self) -> dict:
        flat = dataclasses.asdict(self.hyper)
        for f in dataclasses.fields(self):
            if f.name != "hyper":
                value = getattr(self, f.name)
                flat[f.name] = list(value) if isinstance(value, tuple) else value
        return flat


def hyper_from_flat(flat: dict) -> Hyperparams:
    names = {f.name for f in dataclasses.fields(Hyperparams)}
    return Hyperparams(**{k: v for k, v in flat.items() if k in names})


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data
