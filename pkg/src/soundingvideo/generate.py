"""Sampling pipeline: latents -> decoded frames, audio and metadata on disk.

Each generated sample gets its own directory with lossless PNG frames, a
16-bit WAV track, the raw latent archive, and a metadata record carrying the
seed, task, guidance scale, step count, class label and checkpoint hashes.
If an ffmpeg executable is available and muxing is requested, an .mp4
container is written as well.
"""

from __future__ import annotations

import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import audio as audio_codec
from .archive import archive_hash, save_archive
from .config import RunConfig, config_hash, derive_seed
from .diffusion import schedule_from_config
from .guidance import ConditionPair, GuidanceConfig, sample_latent_pair
from .training import (
    GridCache,
    encode_sample_latent,
    load_autoencoder,
    load_dit,
    write_run_manifest,
)
from .toy import ToyDataset


class GenerateError(RuntimeError):
    pass


def frames_to_pngs(video: torch.Tensor, out_dir: Path) -> None:
    """(F, 3, H, W) in [-1, 1] -> frame_XX.png files."""
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = ((video.clamp(-1, 1) + 1.0) * 127.5).round().byte().numpy()
    for f in range(arr.shape[0]):
        Image.fromarray(np.moveaxis(arr[f], 0, -1), mode="RGB").save(
            out_dir / f"frame_{f:02d}.png")


def render_audio(audio_image: torch.Tensor, cfg: RunConfig, seed: int) -> audio_codec.AudioWave:
    """Decode a [-1, 1] audio image back to a waveform of the clip duration."""
    pixels = ((audio_image.clamp(-1, 1) + 1.0) / 2.0).numpy().astype(np.float64)
    img = audio_codec.AudioImage(pixels=pixels, source_shape=(cfg.mel.n_mels, 0))
    duration = cfg.data.frames / cfg.data.fps
    n_samples = int(round(cfg.data.sample_rate * duration))
    frames = audio_codec.frame_count(n_samples, cfg.mel)
    spec = audio_codec.audio_image_to_spectrogram(
        img, cfg.mel.n_mels, frames, cfg.mel.min_db, cfg.mel.max_db)
    wave = audio_codec.spectrogram_to_wave(spec, cfg.mel, seed=seed)
    samples = wave.samples
    if len(samples) < n_samples:
        samples = np.pad(samples, (0, n_samples - len(samples)))
    return audio_codec.AudioWave(samples=samples[:n_samples], sample_rate=cfg.data.sample_rate)


def mux_sample(sample_dir: Path, fps: float, sample_rate: int) -> Path | None:
    ffmpeg = shutil.which("ffmpeg")
    if ffmpeg is None:
        return None
    out = sample_dir / "video.mp4"
    cmd = [
        ffmpeg, "-y", "-loglevel", "error",
        "-framerate", str(fps), "-i", str(sample_dir / "frames" / "frame_%02d.png"),
        "-i", str(sample_dir / "audio.wav"),
        "-c:v", "libx264", "-pix_fmt", "yuv420p", "-c:a", "aac", "-shortest", str(out),
    ]
    try:
        subprocess.run(cmd, check=True, capture_output=True, timeout=120)
    except Exception:
        return None
    return out


def sample_decoded_batch(
    cfg: RunConfig,
    codec,
    ae,
    dit,
    stats: dict,
    batch: int,
    seed: int,
    cond: ConditionPair | None = None,
    steps: int | None = None,
    guidance: GuidanceConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """Sample latent pairs and decode them to pixel space in memory.

    Returns (videos, audio_images, class_labels, (z_audio, z_video)). Class
    labels for the decoder are drawn uniformly from the configured classes
    and reported alongside the outputs.
    """
    cond = cond or ConditionPair(task="svg")
    steps = steps if steps is not None else cfg.sample.steps
    sched = schedule_from_config(cfg.dit.schedule)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z_a_n, z_v_n = sample_latent_pair(
            dit, sched, cond, batch,
            cfg.audio_latent_shape(), cfg.video_latent_shape(),
            steps=steps, guidance=guidance, generator=gen)
        z_a = z_a_n * stats["audio_std"] + stats["audio_mean"]
        z_v = z_v_n * stats["video_std"] + stats["video_mean"]
        labels = torch.randint(0, cfg.data.classes, (batch,), generator=gen)
        ae_sched = schedule_from_config(cfg.autoencoder.schedule)
        grid_a, grids_v = ae.reconstruct(z_a, z_v, labels, ae_sched,
                                         steps=steps, generator=gen)
        videos = codec.decode(grids_v)
        audio_imgs = codec.decode(grid_a)
    return videos, audio_imgs, labels, (z_a, z_v)


def condition_from_sample(cfg: RunConfig, codec, ae, stats: dict, dataset: ToyDataset,
                          index: int, task: str, batch: int) -> ConditionPair:
    """Encode a dataset sample into a normalized condition payload."""
    cache = GridCache(dataset, codec, cfg.mel, cfg.data.resolution)
    mean_a, _, mean_v, _ = encode_sample_latent(ae, cache, index)
    if task == "a2v":
        z = (torch.from_numpy(mean_a) - stats["audio_mean"]) / stats["audio_std"]
        return ConditionPair(task="a2v", cond_audio=z[None].repeat(batch, 1, 1, 1))
    if task == "v2a":
        z = (torch.from_numpy(mean_v) - stats["video_mean"]) / stats["video_std"]
        return ConditionPair(task="v2a", cond_video=z[None].repeat(batch, 1, 1, 1, 1))
    raise GenerateError(f"task {task!r} takes no condition sample")


def generate(
    cfg: RunConfig,
    ae_ckpt: str | Path,
    dit_ckpt: str | Path,
    out_dir: str | Path,
    task: str = "svg",
    batch: int | None = None,
    steps: int | None = None,
    guidance_scale: float | None = None,
    formulation: str | None = None,
    seed: int | None = None,
    dataset: ToyDataset | None = None,
    cond_index: int | None = None,
    force: bool = False,
    mux: bool = False,
) -> list[Path]:
    """Sample latents, decode both modalities, and write per-sample outputs."""
    out_dir = Path(out_dir)
    batch = batch if batch is not None else cfg.sample.batch
    steps = steps if steps is not None else cfg.sample.steps
    scale = guidance_scale if guidance_scale is not None else cfg.sample.guidance_scale
    form = formulation if formulation is not None else cfg.sample.formulation
    seed = seed if seed is not None else derive_seed(cfg.master_seed, "sample")

    codec, ae, _, ae_manifest = load_autoencoder(cfg, ae_ckpt, force=force)
    dit, dit_manifest = load_dit(cfg, dit_ckpt, force=force)
    stats = dit_manifest["latent_stats"]

    cond = ConditionPair(task="svg")
    if task in ("a2v", "v2a"):
        if dataset is None:
            dataset = ToyDataset(cfg.data)
        if cond_index is None:
            cond_index = int(dataset.val_indices[0])
        cond = condition_from_sample(cfg, codec, ae, stats, dataset, cond_index, task, batch)
    elif task != "svg":
        raise GenerateError(f"unknown task {task!r}")

    videos, audio_imgs, labels, (z_a, z_v) = sample_decoded_batch(
        cfg, codec, ae, dit, stats, batch, seed, cond=cond, steps=steps,
        guidance=GuidanceConfig(scale=scale, formulation=form))

    write_run_manifest(out_dir, cfg, f"sample:{task}")
    sample_dirs = []
    for b in range(batch):
        sdir = out_dir / f"sample_{b:03d}"
        sdir.mkdir(parents=True, exist_ok=True)
        save_archive(sdir / "latents.npz", {
            "z_audio": z_a[b].numpy(), "z_video": z_v[b].numpy(),
        })
        frames_to_pngs(videos[b], sdir / "frames")
        wave = render_audio(audio_imgs[b], cfg, seed=derive_seed(seed, f"phase-{b}"))
        audio_codec.save_wav(sdir / "audio.wav", wave)
        metadata = {
            "task": task, "seed": seed, "steps": steps,
            "guidance_scale": scale, "formulation": form,
            "class_label": int(labels[b]),
            "config_hash": config_hash(cfg),
            "ae_checkpoint_step": ae_manifest["step"],
            "dit_checkpoint_step": dit_manifest["step"],
            "latents_hash": archive_hash(sdir / "latents.npz"),
            "cond_index": cond_index,
        }
        with open(sdir / "metadata.json", "w", encoding="utf-8") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
        if mux:
            mux_sample(sdir, cfg.data.fps, cfg.data.sample_rate)
        sample_dirs.append(sdir)
    return sample_dirs
