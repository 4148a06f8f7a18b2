"""Hierarchical run configuration with strict key checking and stable hashing.

Every tunable in the pipeline lives in one dataclass tree (`RunConfig`).
Configs load from YAML; unknown keys are rejected so typos cannot silently
fall back to defaults. The config hash is embedded in every checkpoint and
output artifact, and loaders refuse mismatched artifacts unless forced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Malformed configuration (unknown key, bad value, bad type)."""


@dataclass
class MelConfig:
    """STFT / mel-filterbank parameters for the audio codec."""

    sample_rate: int = 16000
    n_mels: int = 80
    window: int = 1024
    hop: int = 256
    fmin: float = 0.0
    fmax: float = 8000.0
    min_db: float = -80.0
    max_db: float = 0.0
    griffin_lim_iters: int = 60


@dataclass
class PixelConfig:
    """Pixel-stage codec selection. factor is the spatial downsample f."""

    codec: str = "exact"  # "exact" (orthonormal patch transform) or "learned"
    factor: int = 8
    channels: int = 4  # latent channels of the learned codec; exact uses 3*f*f
    basis_seed: int = 0
    learned_base: int = 32
    weights: str | None = None  # checkpoint dir for the learned codec


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    kind: str = "linear"


@dataclass
class SemanticConfig:
    """Shared semantic space: token count/width and head dimensions."""

    num_tokens: int = 16
    dim: int = 256
    contrast_dim: int = 128
    class_hidden: int = 256


@dataclass
class EncoderNetConfig:
    base: int = 64
    mults: tuple[int, ...] = (1, 2)
    blocks: int = 2


@dataclass
class DecoderNetConfig:
    base: int = 64
    mults: tuple[int, ...] = (1, 2)
    blocks: int = 2
    cond_base: int = 64


@dataclass
class DiscriminatorConfig:
    base: int = 64
    blocks: int = 2


@dataclass
class AETrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 5000
    ckpt_every: int = 1000
    eval_every: int = 250
    eval_ddim_steps: int = 50
    target_mse: float = 0.0  # stop early once eval pixel MSE falls below (0 = off)
    weight_decay: float = 1e-4


@dataclass
class AutoencoderConfig:
    latent_channels: int = 16
    audio_factor: int = 4
    video_factor: int = 2
    encoder: EncoderNetConfig = field(default_factory=EncoderNetConfig)
    decoder: DecoderNetConfig = field(default_factory=DecoderNetConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    temperature_init: float = 14.285714285714286  # 1/0.07
    lambda_cl: float = 0.1
    lambda_co: float = 0.1
    lambda_kl: float = 1e-8
    lambda_gan: float = 0.1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: AETrainConfig = field(default_factory=AETrainConfig)


DIT_PRESETS: dict[str, tuple[int, int, int]] = {
    # depth, width, heads
    "toy": (4, 128, 4),
    "S": (8, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1024, 16),
}


@dataclass
class DiTTrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    ckpt_every: int = 1000
    log_every: int = 1
    weight_decay: float = 1e-4
    latent_mode: str = "online"  # "online" or "cached"


@dataclass
class DiTConfig:
    preset: str = "S"
    patch: int = 2
    cond_task_prob: float = 0.05  # per conditional task (a2v, v2a)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: DiTTrainConfig = field(default_factory=DiTTrainConfig)

    def dims(self) -> tuple[int, int, int]:
        if self.preset not in DIT_PRESETS:
            raise ConfigError(f"unknown DiT preset {self.preset!r}")
        return DIT_PRESETS[self.preset]


@dataclass
class SampleConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    formulation: str = "paper-literal"  # or "standard"
    batch: int = 4


@dataclass
class ToyDataConfig:
    classes: int = 4
    n_per_class: int = 8
    frames: int = 16
    resolution: int = 256
    fps: float = 16.0
    sample_rate: int = 16000
    tone_freqs: tuple[float, ...] = (440.0, 880.0, 1760.0, 3520.0)
    seed: int = 0
    val_fraction: float = 0.1


@dataclass
class RunConfig:
    master_seed: int = 0
    data: ToyDataConfig = field(default_factory=ToyDataConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    pixel: PixelConfig = field(default_factory=PixelConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self) -> "RunConfig":
        if self.data.resolution % self.pixel.factor != 0:
            raise ConfigError("resolution must be divisible by the pixel factor")
        grid = self.data.resolution // self.pixel.factor
        for name, f in (("audio_factor", self.autoencoder.audio_factor),
                        ("video_factor", self.autoencoder.video_factor)):
            if f < 1 or (f & (f - 1)) != 0:
                raise ConfigError(f"{name} must be a positive power of two")
            if grid % f != 0:
                raise ConfigError(f"pixel grid {grid} not divisible by {name}={f}")
        if len(self.data.tone_freqs) < self.data.classes:
            raise ConfigError("need one tone frequency per class")
        ns = self.autoencoder.semantic.num_tokens
        if ns != self.data.frames:
            raise ConfigError("semantic num_tokens must equal the frame count")
        if int(round(ns ** 0.5)) ** 2 != ns:
            raise ConfigError("semantic num_tokens must be a perfect square")
        if self.dit.preset not in DIT_PRESETS:
            raise ConfigError(f"unknown DiT preset {self.dit.preset!r}")
        if self.sample.formulation not in ("paper-literal", "standard"):
            raise ConfigError("guidance formulation must be paper-literal or standard")
        return self

    # latent geometry implied by the configured factors
    def audio_latent_shape(self) -> tuple[int, int, int]:
        side = self.data.resolution // (self.pixel.factor * self.autoencoder.audio_factor)
        return (self.autoencoder.latent_channels, side, side)

    def video_latent_shape(self) -> tuple[int, int, int, int]:
        side = self.data.resolution // (self.pixel.factor * self.autoencoder.video_factor)
        return (self.data.frames, self.autoencoder.latent_channels, side, side)


def _from_dict(cls: type, data: Any, path: str) -> Any:
    if not dataclasses.is_dataclass(cls):
        raise AssertionError(f"{cls} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _ANNOTATED_TYPES.get((cls.__name__, name))
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# forward-annotation lookup for nested dataclasses (annotations are strings here)
_ANNOTATED_TYPES: dict[tuple[str, str], type] = {
    ("RunConfig", "data"): ToyDataConfig,
    ("RunConfig", "mel"): MelConfig,
    ("RunConfig", "pixel"): PixelConfig,
    ("RunConfig", "autoencoder"): AutoencoderConfig,
    ("RunConfig", "dit"): DiTConfig,
    ("RunConfig", "sample"): SampleConfig,
    ("AutoencoderConfig", "encoder"): EncoderNetConfig,
    ("AutoencoderConfig", "decoder"): DecoderNetConfig,
    ("AutoencoderConfig", "discriminator"): DiscriminatorConfig,
    ("AutoencoderConfig", "semantic"): SemanticConfig,
    ("AutoencoderConfig", "schedule"): ScheduleConfig,
    ("AutoencoderConfig", "train"): AETrainConfig,
    ("DiTConfig", "schedule"): ScheduleConfig,
    ("DiTConfig", "train"): DiTTrainConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "").validate()


def config_to_dict(cfg: Any) -> dict:
    def convert(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """Stable 12-hex digest of the fully resolved config tree."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def derive_seed(master_seed: int, label: str) -> int:
    """Deterministic per-stage seed derived from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)


def default_config() -> RunConfig:
    return RunConfig().validate()


def overfit_config(master_seed: int = 0) -> RunConfig:
    """Small-footprint preset: 8-sample dataset, reduced widths, CPU-friendly.

    Keeps the full module graph (all factors, losses, task mixing) but shrinks
    resolution and network widths so the overfit run finishes on a desktop CPU.
    """
    cfg = RunConfig(master_seed=master_seed)
    cfg.data = ToyDataConfig(classes=4, n_per_class=2, resolution=64, seed=master_seed)
    cfg.autoencoder.encoder = EncoderNetConfig(base=32, mults=(1, 2), blocks=1)
    cfg.autoencoder.decoder = DecoderNetConfig(base=32, mults=(1, 2), blocks=1, cond_base=32)
    cfg.autoencoder.discriminator = DiscriminatorConfig(base=32, blocks=1)
    cfg.autoencoder.semantic = SemanticConfig(num_tokens=16, dim=128, contrast_dim=64, class_hidden=128)
    cfg.autoencoder.train = AETrainConfig(
        lr=2e-4, batch_size=4, steps=5000, ckpt_every=1000, eval_every=200,
        eval_ddim_steps=50, target_mse=8e-3,
    )
    cfg.dit.preset = "toy"
    cfg.dit.train = DiTTrainConfig(lr=3e-4, batch_size=8, steps=2000, ckpt_every=1000)
    cfg.sample.batch = 8
    return cfg.validate()
