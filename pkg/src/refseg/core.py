"""Configuration schema, validation and deterministic seeding."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import ConfigError

SPAT_MODES = ("CE", "MIL", "off")
SAMP_FEATURES = ("v", "v2")
SAMP_TEXTS = ("t_sent", "t2")


@dataclass(frozen=True)
class ModelConfig:
    # widths
    d1: int = 64
    d2: int = 32
    # input geometry
    H1: int = 64
    W1: int = 64
    H2: int = 128
    W2: int = 128
    patch1: int = 8
    stride2: int = 16
    # prompter
    n_t: int = 3
    n_p: int = 9
    N_decomp: int = 2
    N_interact: int = 2
    N_pgen: int = 2
    cascade: bool = True
    dense_prompt: bool = True
    # LoRA ranks, 0 = frozen
    r_clip_t: int = 16
    r_clip_v: int = 16
    r_sam_v: int = 32
    # toy backbones
    vocab_size: int = 49408
    max_len: int = 24
    width_text: int = 256
    width_vis: int = 256
    width_sam: int = 256
    depth_text: int = 2
    depth_vis: int = 2
    depth_sam: int = 2
    mlp_ratio: int = 4
    decoder_depth: int = 2
    # losses
    alpha_dice: float = 1.0
    alpha_ortho: float = 0.5
    alpha_dense: float = 0.0
    alpha_spat: float = 0.0
    alpha_samp: float = 0.5
    spat_mode: str = "CE"
    spat_features: str = "v"
    spat_text: str = "t_sent"
    samp_features: str = "v"
    samp_text: str = "t2"
    nce_temperature: float = 0.07
    iou_loss_weight: float = 0.05
    seed: int = 0

    @property
    def h1(self) -> int:
        return self.H1 // self.patch1

    @property
    def w1(self) -> int:
        return self.W1 // self.patch1

    @property
    def h2(self) -> int:
        return self.H2 // self.stride2

    @property
    def w2(self) -> int:
        return self.W2 // self.stride2

    @property
    def dense_hw(self) -> tuple[int, int]:
        return self.H2 // 4, self.W2 // 4

    @property
    def heads1(self) -> int:
        return max(1, self.d1 // 16)

    @property
    def heads2(self) -> int:
        return max(1, self.d2 // 16)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 300
    max_steps: int = 0  # 0 = derived from epochs
    warmup_frac: float = 0.05
    min_lr: float = 1e-6
    grad_clip: float = 1.0
    eval_every: int = 1  # epochs
    log_every: int = 1


def full_scale_config(**overrides) -> ModelConfig:
    """Input geometry, counts and depths at the full scale.

    Widths stay at toy values; real backbone widths belong to pretrained
    checkpoints that are not loaded here.
    """
    base = ModelConfig(H1=512, W1=512, H2=1024, W2=1024, patch1=16, stride2=16,
                       n_t=3, n_p=9, N_decomp=2, N_interact=2, N_pgen=2,
                       r_clip_t=16, r_clip_v=16, r_sam_v=32)
    return replace(base, **overrides)


def toy_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def synth_bench_config(**overrides) -> ModelConfig:
    """Toy widths with a finer mask-encoder stride (16x16 tokens at 128 px) and
    narrower frozen backbones, sized for the CPU synthetic benchmark."""
    base = ModelConfig(stride2=8, width_text=128, width_vis=128, width_sam=128)
    return replace(base, **overrides)


def toy_train_config(**overrides) -> TrainConfig:
    # from-scratch toy heads need a larger step than pretrained fine-tuning
    return replace(TrainConfig(lr=1e-3, batch_size=16, epochs=100), **overrides)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return ``cfg`` unchanged or raise ConfigError on the first violated rule."""
    dims = ["d1", "d2", "H1", "W1", "H2", "W2", "patch1", "stride2", "n_t", "n_p",
            "vocab_size", "max_len", "width_text", "width_vis", "width_sam",
            "depth_text", "depth_vis", "depth_sam", "mlp_ratio", "decoder_depth"]
    for name in dims:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)}")
    for name in ("N_decomp", "N_interact", "N_pgen", "r_clip_t", "r_clip_v", "r_sam_v"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    for side, patch in (("H1", "patch1"), ("W1", "patch1"), ("H2", "stride2"), ("W2", "stride2")):
        if getattr(cfg, side) % getattr(cfg, patch):
            raise ConfigError(f"{side}={getattr(cfg, side)} not divisible by "
                              f"{patch}={getattr(cfg, patch)}")
    for side in ("H2", "W2"):
        if getattr(cfg, side) % 4:
            raise ConfigError(f"{side}={getattr(cfg, side)} not divisible by 4")
    ratio = cfg.stride2 // 4
    if cfg.stride2 % 4 or ratio & (ratio - 1):
        raise ConfigError(f"stride2={cfg.stride2} must be 4 times a power of two")
    if cfg.d2 % 8:
        raise ConfigError(f"d2={cfg.d2} must be divisible by 8")
    if cfg.d1 % cfg.heads1 or cfg.d2 % cfg.heads2:
        raise ConfigError("widths must split evenly over attention heads")
    for name in ("alpha_dice", "alpha_ortho", "alpha_dense", "alpha_spat", "alpha_samp",
                 "iou_loss_weight"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg.nce_temperature <= 0:
        raise ConfigError("nce_temperature must be > 0")
    if cfg.spat_mode not in SPAT_MODES:
        raise ConfigError(f"spat_mode must be one of {SPAT_MODES}")
    if cfg.spat_features not in SAMP_FEATURES or cfg.samp_features not in SAMP_FEATURES:
        raise ConfigError(f"spat_features/samp_features must be one of {SAMP_FEATURES}")
    if cfg.spat_text not in SAMP_TEXTS or cfg.samp_text not in SAMP_TEXTS:
        raise ConfigError(f"spat_text/samp_text must be one of {SAMP_TEXTS}")
    return cfg


def validate_train_config(tcfg: TrainConfig) -> TrainConfig:
    if tcfg.lr < 0 or tcfg.weight_decay < 0 or tcfg.min_lr < 0:
        raise ConfigError("lr, weight_decay and min_lr must be >= 0")
    if tcfg.batch_size < 1 or tcfg.epochs < 1 or tcfg.eval_every < 1 or tcfg.log_every < 1:
        raise ConfigError("batch_size, epochs, eval_every and log_every must be >= 1")
    if tcfg.max_steps < 0:
        raise ConfigError("max_steps must be >= 0")
    if not 0.0 <= tcfg.warmup_frac < 1.0:
        raise ConfigError("warmup_frac must lie in [0, 1)")
    return tcfg


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------- config files

def _coerce(field: dataclasses.Field, raw: str, lineno: int) -> Any:
    kind = field.type if isinstance(field.type, type) else {"int": int, "float": float,
                                                            "bool": bool, "str": str}[field.type]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {field.name}={raw!r}") from None


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse flat ``key=value`` text; ``#`` starts a comment; unknown keys fail."""
    mfields = {f.name: f for f in fields(ModelConfig)}
    tfields = {f.name: f for f in fields(TrainConfig)}
    mvals: dict[str, Any] = {}
    tvals: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in mfields:
            mvals[key] = _coerce(mfields[key], raw, lineno)
        elif key in tfields:
            tvals[key] = _coerce(tfields[key], raw, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return (validate_config(ModelConfig(**mvals)),
            validate_train_config(TrainConfig(**tvals)))


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: ModelConfig, tcfg: TrainConfig | None = None) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    if tcfg is not None:
        lines += [f"{f.name}={getattr(tcfg, f.name)}" for f in fields(tcfg)]
    return "\n".join(lines) + "\n"


def save_config(path: str | Path, cfg: ModelConfig, tcfg: TrainConfig | None = None) -> None:
    Path(path).write_text(format_config(cfg, tcfg), encoding="utf-8")
