"""Dataclass configs with strict JSON loading.

Every config is a plain dataclass validated in ``__post_init__``. ``from_dict`` rejects unknown keys
and nested dicts are converted to their sub-config types.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

BRANCHES = ("fusion", "visual", "audio")
CARRIERS = ("audio", "visual", "both", "neither")


@dataclass
class ImportanceConfig:
    gamma: float = 3.0
    eps_min: float = 0.2
    # None means 1 - eps_min, which keeps labels complementary under swap.
    eps_max: float | None = None
    warmup_epochs: int = 30

    def __post_init__(self):
        if self.eps_max is None:
            self.eps_max = 1.0 - self.eps_min
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 < self.eps_min < 0.5:
            raise ConfigError(f"eps_min must lie in (0, 0.5), got {self.eps_min}")
        if not 0.5 < self.eps_max < 1.0:
            raise ConfigError(f"eps_max must lie in (0.5, 1), got {self.eps_max}")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")


@dataclass
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 10.0
    lambda3: float = 0.5
    tau: float = 2.0
    saliency_margin: float = 0.2
    saliency_pairs: int = 1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.saliency_pairs < 1:
            raise ConfigError("saliency_pairs must be >= 1")


@dataclass
class ModelConfig:
    d: int = 128
    d_v: int = 32
    d_a: int = 32
    d_q: int = 16
    max_frames: int = 128
    max_tokens: int = 32
    heads: int = 4
    conv_kernel: int = 7
    kernel_bank: tuple[int, ...] = (1, 3, 5)
    slots: int = 3
    slot_iters: int = 3
    # Event queries attend to the other modality's slots when True.
    cross_modal_events: bool = False
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    use_kd: bool = True
    lr: float = 5e-4
    weight_decay: float = 0.01
    # Applied to projected inputs and context-query outputs while training.
    dropout: float = 0.2
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    branch_for_inference: str = "fusion"

    def __post_init__(self):
        self.kernel_bank = tuple(int(k) for k in self.kernel_bank)
        for name in ("d", "d_v", "d_a", "d_q", "max_frames", "max_tokens", "heads",
                     "conv_kernel", "slots", "slot_iters", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.kernel_bank:
            raise ConfigError("kernel_bank must not be empty")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_bank):
            raise ConfigError(f"kernel sizes must be odd and positive: {self.kernel_bank}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if self.d % 2:
            raise ConfigError("d must be even (the bidirectional GRU splits it in half)")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.branch_for_inference not in BRANCHES:
            raise ConfigError(f"branch_for_inference must be one of {BRANCHES}")


@dataclass
class SyntheticSpec:
    n_samples: int = 2500
    n_test: int = 500
    T: int = 32
    d_v: int = 32
    d_a: int = 32
    d_q: int = 16
    codebook_size: int = 16
    # proportions over (audio, visual, both, neither)
    carrier_mix: tuple[float, ...] = (0.4, 0.4, 0.1, 0.1)
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.carrier_mix = tuple(float(x) for x in self.carrier_mix)
        if len(self.carrier_mix) != 4 or any(x < 0 for x in self.carrier_mix):
            raise ConfigError("carrier_mix needs four nonnegative proportions")
        if abs(sum(self.carrier_mix) - 1.0) > 1e-9:
            raise ConfigError(f"carrier_mix must sum to 1, got {sum(self.carrier_mix)}")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.n_samples < 1 or not 0 <= self.n_test <= self.n_samples:
            raise ConfigError("need n_samples >= 1 and 0 <= n_test <= n_samples")
        if self.T < 2:
            raise ConfigError("T must be >= 2")


def from_dict(cls, data: dict[str, Any]):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SUBCONFIGS.get((cls, name))
        kwargs[name] = from_dict(sub, value) if sub is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_SUBCONFIGS = {
    (ModelConfig, "importance"): ImportanceConfig,
    (ModelConfig, "loss"): LossWeights,
}


def to_dict(cfg) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def load_json(cls, path: str | os.PathLike):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(cls, data)


def load_model_config(path: str | os.PathLike | None = None) -> ModelConfig:
    """Load a model config; ``IMG_SEED`` in the environment overrides ``seed``."""
    cfg = ModelConfig() if path is None else load_json(ModelConfig, path)
    env_seed = os.environ.get("IMG_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"IMG_SEED must be an integer, got {env_seed!r}") from exc
    return cfg
