"""Audio codec: waveforms <-> normalized mel spectrograms <-> RGB audio images.

The forward chain turns a 1-D waveform into an "audio image": magnitude STFT
(valid framing, periodic Hann), mel filterbank, log scaling clamped to fixed
dB bounds and normalized to [0, 1], grayscale-to-RGB replication, bilinear
resize to the video canvas. The inverse chain averages channels, resizes back,
undoes the dB normalization (values at the exact floor gate to true zero) and
reconstructs phase with Griffin-Lim. All functions are pure and deterministic
given their seeds.

Bilinear resizes use half-pixel centers (non-aligned corners) in both
directions; at matching sizes the resize is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .config import MelConfig


class AudioCodecError(ValueError):
    pass


@dataclass
class AudioWave:
    """1-D amplitude signal in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioCodecError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioCodecError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioCodecError("sample_rate must be positive")


@dataclass
class MelSpectrogram:
    """Mel-band energies normalized to [0, 1], with the dB bounds recorded."""

    values: np.ndarray  # (n_mels, frames)
    min_db: float = -80.0
    max_db: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) == 0:
            raise AudioCodecError(f"spectrogram must be 2-D non-empty, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise AudioCodecError("spectrogram contains non-finite values")
        if self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9:
            raise AudioCodecError("normalized spectrogram values must lie in [0, 1]")

    @property
    def mel_bands(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class AudioImage:
    """3xHxW image in [0, 1]; three channels replicate the grayscale map."""

    pixels: np.ndarray
    source_shape: tuple[int, int]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise AudioCodecError(f"audio image must be 3xHxW, got {self.pixels.shape}")


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 edge frequencies in Hz, equally spaced on the mel scale."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def _filterbank_cached(sample_rate, n_mels, window, fmin, fmax) -> np.ndarray:
    cfg = MelConfig(sample_rate=sample_rate, n_mels=n_mels, window=window,
                    fmin=fmin, fmax=fmax)
    n_freq = window // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_freq)
    edges = mel_band_edges(cfg)
    fb = np.zeros((n_mels, n_freq))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - left) / max(center - left, 1e-12)
        down = (right - freqs) / max(right - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return fb


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, window//2 + 1) triangular filterbank with unit peaks."""
    return _filterbank_cached(cfg.sample_rate, cfg.n_mels, cfg.window, cfg.fmin, cfg.fmax)


def dominant_band_for_frequency(cfg: MelConfig, freq_hz: float) -> int:
    """Band with the largest triangle response at freq_hz (closed form)."""
    edges = mel_band_edges(cfg)
    best, best_w = 0, -1.0
    for m in range(cfg.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        w = min((freq_hz - left) / max(center - left, 1e-12),
                (right - freq_hz) / max(right - center, 1e-12))
        w = max(0.0, min(1.0, w))
        if w > best_w:
            best, best_w = m, w
    return best


# ---------------------------------------------------------------------------
# STFT (valid framing, periodic Hann), forward mel transform


def _hann(window: int) -> np.ndarray:
    n = np.arange(window)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window)


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    """Valid-mode frame count: 1 + floor((len - window) / hop), no padding."""
    if n_samples < cfg.window:
        raise AudioCodecError(f"waveform of {n_samples} samples shorter than window {cfg.window}")
    return 1 + (n_samples - cfg.window) // cfg.hop


def _frames(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    t = frame_count(len(samples), cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(t)[:, None]
    return samples[idx]


def stft_complex(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(window//2 + 1, frames) complex STFT, amplitude-normalized so a
    full-scale sine peaks near magnitude 1."""
    w = _hann(cfg.window)
    spec = np.fft.rfft(_frames(samples, cfg) * w[None, :], axis=1)
    return spec.T / (w.sum() / 2.0)


def mel_forward(wave: AudioWave, cfg: MelConfig) -> MelSpectrogram:
    """Normalized mel spectrogram of a waveform.

    Log-magnitude (20*log10) clamped to [min_db, max_db] then mapped to
    [0, 1]. Digital silence lands exactly on the 0.0 floor.
    """
    if len(wave.samples) < cfg.window:
        raise AudioCodecError(
            f"waveform of {len(wave.samples)} samples shorter than window {cfg.window}")
    mag = np.abs(stft_complex(wave.samples, cfg))
    mel = mel_filterbank(cfg) @ mag
    db = 20.0 * np.log10(np.maximum(mel, 1e-10))
    db = np.clip(db, cfg.min_db, cfg.max_db)
    unit = (db - cfg.min_db) / (cfg.max_db - cfg.min_db)
    return MelSpectrogram(values=unit, min_db=cfg.min_db, max_db=cfg.max_db)


def normalize_unit(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1]; idempotent on already-normalized spectrograms."""
    return np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers) and the image chain


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """2-D bilinear resample with half-pixel (non-aligned-corner) sampling.

    Exact identity when the output size matches the input size.
    """
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    r0, r1, rf = axis_weights(in_h, out_h)
    c0, c1, cf = axis_weights(in_w, out_w)
    top = values[r0][:, c0] * (1 - cf)[None, :] + values[r0][:, c1] * cf[None, :]
    bot = values[r1][:, c0] * (1 - cf)[None, :] + values[r1][:, c1] * cf[None, :]
    return top * (1 - rf)[:, None] + bot * rf[:, None]


def spectrogram_to_audio_image(spec: MelSpectrogram, height: int, width: int) -> AudioImage:
    """Grayscale spectrogram replicated to RGB and resized to the canvas."""
    if height <= 0 or width <= 0:
        raise AudioCodecError("canvas size must be positive")
    gray = np.clip(resize_bilinear(spec.values, height, width), 0.0, 1.0)
    pixels = np.repeat(gray[None, :, :], 3, axis=0)
    return AudioImage(pixels=pixels, source_shape=(spec.mel_bands, spec.frames))


def audio_image_to_spectrogram(
    img: AudioImage, mel_bands: int, frames: int,
    min_db: float = -80.0, max_db: float = 0.0,
) -> MelSpectrogram:
    """Channel-mean then resize back to mel-grid shape; values clipped to [0,1]."""
    gray = img.pixels.mean(axis=0)
    values = normalize_unit(resize_bilinear(gray, mel_bands, frames))
    return MelSpectrogram(values=values, min_db=min_db, max_db=max_db)


# ---------------------------------------------------------------------------
# Griffin-Lim phase reconstruction


def istft(spec: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Overlap-add inverse of `stft_complex` (same amplitude normalization).

    The squared-window normalizer is floored at a fraction of its peak so the
    partially covered boundary samples fade out instead of being amplified.
    """
    w = _hann(cfg.window)
    spec = np.asarray(spec) * (w.sum() / 2.0)
    frames = np.fft.irfft(spec.T, n=cfg.window, axis=1)
    t = frames.shape[0]
    n_out = cfg.window + (t - 1) * cfg.hop
    out = np.zeros(n_out)
    norm = np.zeros(n_out)
    for k in range(t):
        start = k * cfg.hop
        out[start : start + cfg.window] += frames[k] * w
        norm[start : start + cfg.window] += w * w
    return out / np.maximum(norm, 1e-2 * norm.max())


def griffin_lim(magnitude: np.ndarray, cfg: MelConfig, iterations: int, seed: int = 0) -> np.ndarray:
    """Iterative phase recovery from a linear magnitude spectrogram.

    magnitude: (window//2 + 1, frames) in the normalized STFT units.
    Deterministic for a fixed seed (uniform random initial phase).
    """
    if iterations < 1:
        raise AudioCodecError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    spec = magnitude * phase
    for _ in range(iterations):
        x = istft(spec, cfg)
        rebuilt = stft_complex(x, cfg)
        phase = np.exp(1j * np.angle(rebuilt))
        spec = magnitude * phase
    return istft(spec, cfg)


def spectrogram_to_wave(
    spec: MelSpectrogram, cfg: MelConfig, iterations: int | None = None, seed: int = 0
) -> AudioWave:
    """Waveform whose mel spectrogram approximates `spec` (Griffin-Lim).

    Cells at the exact normalized floor are gated to true zero magnitude, so
    an all-floor spectrogram reconstructs to silence. Deterministic for a
    fixed seed.
    """
    if iterations is None:
        iterations = cfg.griffin_lim_iters
    if iterations < 1:
        raise AudioCodecError("iterations must be >= 1")
    db = spec.values * (spec.max_db - spec.min_db) + spec.min_db
    mel_mag = 10.0 ** (db / 20.0)
    mel_mag = np.where(spec.values <= 0.0, 0.0, mel_mag)
    if not mel_mag.any():
        n_out = cfg.window + (spec.frames - 1) * cfg.hop
        return AudioWave(samples=np.zeros(n_out), sample_rate=cfg.sample_rate)
    fb = mel_filterbank(cfg)
    linear = np.clip(np.linalg.pinv(fb) @ mel_mag, 0.0, None)
    samples = griffin_lim(linear, cfg, iterations, seed=seed)
    peak = np.max(np.abs(samples))
    if peak > 1.0:
        samples = samples / peak
    return AudioWave(samples=samples, sample_rate=cfg.sample_rate)


# ---------------------------------------------------------------------------
# 16-bit PCM WAV I/O


def save_wav(path: str | Path, wave: AudioWave) -> None:
    pcm = np.round(np.clip(wave.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)


def load_wav(path: str | Path) -> AudioWave:
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise AudioCodecError(f"expected 16-bit PCM WAV, got dtype {data.dtype}")
    if data.ndim != 1:
        raise AudioCodecError("expected mono WAV")
    return AudioWave(samples=data.astype(np.float64) / 32767.0, sample_rate=int(rate))
