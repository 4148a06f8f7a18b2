"""Synthetic paired audio-video dataset with controllable correlation.

Each class owns a color, a trajectory family and a pure-tone frequency; the
tone's amplitude envelope tracks the moving shape's speed. Every sample is a
pure function of (label, seed), so regeneration is bit-identical and the
cross-modal structure has a measurable ground truth: the dominant mel band
identifies the class from audio, the shape color identifies it from video.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import audio as audio_codec
from .archive import load_archive, save_archive
from .config import MelConfig, ToyDataConfig, derive_seed

CLASS_COLORS = np.array([
    [0.95, 0.15, 0.15],  # red
    [0.15, 0.90, 0.15],  # green
    [0.20, 0.30, 0.95],  # blue
    [0.95, 0.85, 0.10],  # yellow
    [0.85, 0.20, 0.85],  # magenta
    [0.15, 0.85, 0.85],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.75, 0.75, 0.75],  # gray
])


class ToyDataError(ValueError):
    pass


@dataclass
class ToySample:
    video: np.ndarray        # (F, 3, H, W) float32 in [-1, 1]
    wave: audio_codec.AudioWave
    label: int
    seed: int


def _trajectory(label: int, n_points: int, res: int, rng: np.random.Generator) -> np.ndarray:
    """(n_points, 2) center positions; speed varies along the path."""
    cx = cy = res / 2.0
    amp = res * (0.22 + 0.08 * rng.random())
    phase = rng.random() * 2 * np.pi
    wobble = 0.25 + 0.15 * rng.random()
    t = np.arange(n_points) / max(n_points - 1, 1)
    # warped progress makes the instantaneous speed non-constant
    u = t + wobble * np.sin(2 * np.pi * t + phase) / (2 * np.pi)
    theta = 2 * np.pi * u
    kind = label % 4
    if kind == 0:
        xs, ys = cx + amp * np.sin(theta), np.full_like(theta, cy)
    elif kind == 1:
        xs, ys = np.full_like(theta, cx), cy + amp * np.sin(theta)
    elif kind == 2:
        xs, ys = cx + amp * np.cos(theta), cy + amp * np.sin(theta)
    else:
        xs, ys = cx + amp * np.sin(theta), cy + amp * np.sin(theta)
    return np.stack([xs, ys], axis=1)


def _draw_frame(res: int, center: np.ndarray, radius: float, color: np.ndarray,
                background: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    dist = np.sqrt((xx - center[0]) ** 2 + (yy - center[1]) ** 2)
    mask = np.clip((radius - dist) / max(radius * 0.15, 1.0) + 0.5, 0.0, 1.0)
    frame = background[:, None, None] * (1.0 - mask) + color[:, None, None] * mask
    return frame.astype(np.float32)


def synth_sample(label: int, seed: int, cfg: ToyDataConfig) -> ToySample:
    """Deterministic paired clip: moving shape plus speed-enveloped tone."""
    if not 0 <= label < cfg.classes:
        raise ToyDataError(f"label {label} out of range for {cfg.classes} classes")
    rng = np.random.default_rng([seed, label])
    res, frames = cfg.resolution, cfg.frames

    positions = _trajectory(label, frames + 1, res, rng)
    radius = res * (0.10 + 0.04 * rng.random())
    color = CLASS_COLORS[label % len(CLASS_COLORS)]
    background = np.array([0.08, 0.08, 0.08]) + 0.04 * rng.random(3)

    video = np.stack([
        _draw_frame(res, positions[f], radius, color, background) for f in range(frames)
    ])
    video = (video * 2.0 - 1.0).astype(np.float32)

    # speed per frame drives the tone's amplitude envelope
    speed = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    span = speed.max() - speed.min()
    env_frames = 0.3 + 0.7 * ((speed - speed.min()) / span if span > 1e-9 else np.ones(frames) * 0.5)

    n_samples = int(round(cfg.sample_rate * frames / cfg.fps))
    t = np.arange(n_samples) / cfg.sample_rate
    frame_t = (np.arange(frames) + 0.5) * (frames / cfg.fps) / frames
    envelope = np.interp(t, frame_t, env_frames)
    freq = float(cfg.tone_freqs[label])
    phase = rng.random() * 2 * np.pi
    gain = 0.6 + 0.1 * rng.random()
    samples = gain * envelope * np.sin(2 * np.pi * freq * t + phase)
    wave = audio_codec.AudioWave(samples=samples, sample_rate=cfg.sample_rate)
    return ToySample(video=video, wave=wave, label=label, seed=seed)


def class_tone_band(cfg: ToyDataConfig, mel_cfg: MelConfig, label: int) -> int:
    """Mel band owning the class tone (closed-form filterbank arithmetic)."""
    return audio_codec.dominant_band_for_frequency(mel_cfg, float(cfg.tone_freqs[label]))


def train_val_split(n: int, split_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 90/10 split; both sides non-empty."""
    if n < 2:
        raise ToyDataError("need at least two samples to split")
    order = np.random.default_rng(split_seed).permutation(n)
    n_train = min(max(int(np.floor(0.9 * n)), 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


class ToyDataset:
    """Indexed collection of ToySamples with a deterministic train/val split."""

    def __init__(self, cfg: ToyDataConfig):
        if cfg.n_per_class < 2:
            raise ToyDataError("n_per_class must be >= 2")
        self.cfg = cfg
        self.labels = [k for k in range(cfg.classes) for _ in range(cfg.n_per_class)]
        self.seeds = [derive_seed(cfg.seed, f"sample-{i}") for i in range(len(self.labels))]
        self.train_indices, self.val_indices = train_val_split(len(self.labels), cfg.seed)
        self._cache: dict[int, ToySample] = {}

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> ToySample:
        if index not in self._cache:
            self._cache[index] = synth_sample(self.labels[index], self.seeds[index], self.cfg)
        return self._cache[index]

    def materialize(self, out_dir: str | Path) -> Path:
        """Write one archive per sample plus an index manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        index = []
        for i in range(len(self)):
            sample = self[i]
            name = f"sample_{i:04d}.npz"
            save_archive(out_dir / name, {
                "video": sample.video,
                "wave": sample.wave.samples,
                "label": np.array(sample.label),
                "seed": np.array(sample.seed),
            })
            index.append({"file": name, "label": sample.label, "seed": sample.seed})
        manifest = {
            "samples": index,
            "train_indices": [int(i) for i in self.train_indices],
            "val_indices": [int(i) for i in self.val_indices],
            "sample_rate": self.cfg.sample_rate,
        }
        with open(out_dir / "index.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
        return out_dir


def load_materialized_sample(path: str | Path, sample_rate: int) -> ToySample:
    arrays = load_archive(path)
    wave = audio_codec.AudioWave(samples=arrays["wave"], sample_rate=sample_rate)
    return ToySample(video=arrays["video"], wave=wave,
                     label=int(arrays["label"]), seed=int(arrays["seed"]))


def sample_tensors(sample: ToySample, mel_cfg: MelConfig, resolution: int
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """(video, audio_image) tensors in [-1, 1] ready for the pixel codec."""
    video = torch.from_numpy(sample.video)
    spec = audio_codec.mel_forward(sample.wave, mel_cfg)
    img = audio_codec.spectrogram_to_audio_image(spec, resolution, resolution)
    audio_img = torch.from_numpy((img.pixels * 2.0 - 1.0).astype(np.float32))
    return video, audio_img
