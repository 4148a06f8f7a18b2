"""Evaluation: reconstruction fidelity, conditional gain, probes, and the
toy cross-modal consistency metric.

Consistency is judged by two independent oracles: the dominant mel band of
the decoded audio (mapped to the nearest class tone band) and a small color
classifier fitted on the toy dataset's frames. A generated pair is consistent
when both oracles name the same class.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from . import audio as audio_codec
from .archive import RecordWriter
from .config import RunConfig, derive_seed
from .diffusion import q_sample, schedule_from_config
from .generate import sample_decoded_batch
from .toy import ToyDataset, class_tone_band
from .training import (
    GridCache,
    build_dit_from_config,
    compute_latent_table,
    load_autoencoder,
    load_dit,
    reconstruction_eval,
)


# ---------------------------------------------------------------------------
# video shape-color classifier


def video_color_features(video: np.ndarray) -> np.ndarray:
    """Color of the brightest region per frame, pooled over the clip."""
    img = (np.asarray(video) + 1.0) / 2.0  # (F, 3, H, W)
    per_frame = []
    for f in range(img.shape[0]):
        frame = img[f]
        brightness = frame.max(axis=0)
        thresh = np.quantile(brightness, 0.98)
        mask = brightness >= thresh
        per_frame.append(frame[:, mask].mean(axis=1))
    per_frame = np.stack(per_frame)
    return np.concatenate([per_frame.mean(axis=0), per_frame.max(axis=0)])


def fit_video_classifier(dataset: ToyDataset) -> LogisticRegression:
    feats = np.stack([video_color_features(dataset[i].video) for i in range(len(dataset))])
    labels = np.asarray(dataset.labels)
    clf = LogisticRegression(max_iter=2000)
    clf.fit(feats, labels)
    return clf


def classify_video(clf: LogisticRegression, video: torch.Tensor) -> int:
    return int(clf.predict(video_color_features(video.numpy())[None])[0])


# ---------------------------------------------------------------------------
# audio tone-band oracle


def classify_audio_image(audio_image: torch.Tensor, cfg: RunConfig) -> int:
    """Nearest class by dominant mel band of a decoded [-1, 1] audio image."""
    pixels = ((audio_image.clamp(-1, 1) + 1.0) / 2.0).numpy().astype(np.float64)
    img = audio_codec.AudioImage(pixels=pixels, source_shape=(cfg.mel.n_mels, 0))
    n_samples = int(round(cfg.data.sample_rate * cfg.data.frames / cfg.data.fps))
    frames = audio_codec.frame_count(n_samples, cfg.mel)
    spec = audio_codec.audio_image_to_spectrogram(
        img, cfg.mel.n_mels, frames, cfg.mel.min_db, cfg.mel.max_db)
    energy = spec.values.max(axis=0)
    active = energy > 0.5 * energy.max() if energy.max() > 0 else np.ones_like(energy, bool)
    bands = spec.values[:, active].argmax(axis=0)
    dominant = int(np.bincount(bands).argmax())
    class_bands = [class_tone_band(cfg.data, cfg.mel, k) for k in range(cfg.data.classes)]
    return int(np.argmin([abs(dominant - b) for b in class_bands]))


def consistency_rate(videos: torch.Tensor, audio_images: torch.Tensor,
                     clf: LogisticRegression, cfg: RunConfig) -> dict:
    """Fraction of generated pairs whose two oracles agree on the class."""
    n = videos.shape[0]
    matches = 0
    for b in range(n):
        if classify_video(clf, videos[b]) == classify_audio_image(audio_images[b], cfg):
            matches += 1
    rate = matches / n
    chance = 1.0 / cfg.data.classes
    sigma = float(np.sqrt(chance * (1.0 - chance) / n))
    return {"rate": rate, "n": n, "chance": chance, "sigma": sigma,
            "z": (rate - chance) / sigma}


# ---------------------------------------------------------------------------
# conditional-vs-null epsilon loss on held-out latents


@torch.no_grad()
def conditional_epsilon_losses(
    dit, sched, z_audio: torch.Tensor, z_video: torch.Tensor,
    n_draws: int = 32, seed: int = 0,
) -> dict[str, float]:
    """Paired comparison: same (t, noise) with true vs null condition payload.

    z_audio / z_video are normalized clean latents of held-out samples.
    a2v scores the video-noise prediction given the audio condition; v2a the
    audio-noise prediction given the video condition.
    """
    gen = torch.Generator().manual_seed(seed)
    b = z_audio.shape[0]
    out = {"a2v_cond": 0.0, "a2v_null": 0.0, "v2a_cond": 0.0, "v2a_null": 0.0}
    for _ in range(n_draws):
        t = torch.randint(1, sched.steps + 1, (b,), generator=gen)
        noise_a = torch.randn(z_audio.shape, generator=gen)
        noise_v = torch.randn(z_video.shape, generator=gen)
        x_a = q_sample(z_audio, t, noise_a, sched)
        x_v = q_sample(z_video, t, noise_v, sched)
        pa_null, pv_null = dit(x_a, x_v, t)
        _, pv_cond = dit(x_a, x_v, t, cond_a=z_audio)
        pa_cond, _ = dit(x_a, x_v, t, cond_v=z_video)
        out["a2v_cond"] += float(torch.mean((pv_cond - noise_v) ** 2))
        out["a2v_null"] += float(torch.mean((pv_null - noise_v) ** 2))
        out["v2a_cond"] += float(torch.mean((pa_cond - noise_a) ** 2))
        out["v2a_null"] += float(torch.mean((pa_null - noise_a) ** 2))
    return {k: v / n_draws for k, v in out.items()}


# ---------------------------------------------------------------------------
# semantic probes


@torch.no_grad()
def semantic_features(ae, cache: GridCache, indices) -> np.ndarray:
    feats = []
    for i in indices:
        video_grids, audio_grid = cache.grids(int(i))
        z_a = ae.encode_audio(audio_grid[None]).mean
        z_v = ae.encode_video(video_grids[None]).mean
        s_a = ae.project_semantic(z_a, "audio").mean(dim=1)
        s_v = ae.project_semantic(z_v, "video").mean(dim=1)
        feats.append(torch.cat([s_a, s_v], dim=-1)[0].numpy())
    return np.stack(feats)


def semantic_probe_accuracy(ae, cache: GridCache, dataset: ToyDataset) -> dict[str, float]:
    train_idx = [int(i) for i in dataset.train_indices]
    val_idx = [int(i) for i in dataset.val_indices]
    x_train = semantic_features(ae, cache, train_idx)
    y_train = np.asarray([dataset.labels[i] for i in train_idx])
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_train, y_train)
    train_acc = float(clf.score(x_train, y_train))
    x_val = semantic_features(ae, cache, val_idx)
    y_val = np.asarray([dataset.labels[i] for i in val_idx])
    return {"probe_train_acc": train_acc, "probe_val_acc": float(clf.score(x_val, y_val))}


@torch.no_grad()
def classification_head_accuracy(ae, cache: GridCache, dataset: ToyDataset, indices) -> float:
    correct = 0
    for i in indices:
        video_grids, audio_grid = cache.grids(int(i))
        z_a = ae.encode_audio(audio_grid[None]).mean
        z_v = ae.encode_video(video_grids[None]).mean
        s_a = ae.project_semantic(z_a, "audio")
        s_v = ae.project_semantic(z_v, "video")
        pred = int(ae.classification_head.logits(s_a, s_v).argmax(dim=-1)[0])
        correct += int(pred == dataset.labels[int(i)])
    return correct / len(indices)


# ---------------------------------------------------------------------------
# full evaluation


def evaluate(cfg: RunConfig, ae_ckpt: str | Path, dit_ckpt: str | Path,
             out_path: str | Path, dataset: ToyDataset | None = None,
             consistency_batch: int = 16, force: bool = False) -> list[dict]:
    """Metrics record: reconstruction, conditional gain, probes, consistency."""
    dataset = dataset or ToyDataset(cfg.data)
    codec, ae, _, _ = load_autoencoder(cfg, ae_ckpt, force=force)
    dit, dit_manifest = load_dit(cfg, dit_ckpt, force=force)
    stats = dit_manifest["latent_stats"]
    step = int(dit_manifest["step"])
    cache = GridCache(dataset, codec, cfg.mel, cfg.data.resolution)
    sched = schedule_from_config(cfg.dit.schedule)

    records = []
    recon = reconstruction_eval(
        ae, codec, cache, dataset.train_indices,
        schedule_from_config(cfg.autoencoder.schedule), cfg.sample.steps,
        seed=derive_seed(cfg.master_seed, "evaluate-recon"))
    records.append({"step": step, "metric": "reconstruction", **recon})

    val_idx = [int(i) for i in dataset.val_indices]
    table = compute_latent_table(ae, cache, val_idx)
    z_a = (torch.from_numpy(np.stack([table[i][0] for i in val_idx]))
           - stats["audio_mean"]) / stats["audio_std"]
    z_v = (torch.from_numpy(np.stack([table[i][2] for i in val_idx]))
           - stats["video_mean"]) / stats["video_std"]
    cond = conditional_epsilon_losses(dit, sched, z_a, z_v,
                                      seed=derive_seed(cfg.master_seed, "evaluate-cond"))
    records.append({"step": step, "metric": "conditional_epsilon", **cond})

    probes = semantic_probe_accuracy(ae, cache, dataset)
    head_acc = classification_head_accuracy(ae, cache, dataset, dataset.train_indices)
    records.append({"step": step, "metric": "probes", **probes,
                    "classification_head_train_acc": head_acc})

    clf = fit_video_classifier(dataset)
    videos, audio_imgs, _, _ = sample_decoded_batch(
        cfg, codec, ae, dit, stats, consistency_batch,
        seed=derive_seed(cfg.master_seed, "evaluate-consistency"))
    cons = consistency_rate(videos, audio_imgs, clf, cfg)
    records.append({"step": step, "metric": "consistency", **cons})

    untrained = build_dit_from_config(cfg)
    videos_u, audio_u, _, _ = sample_decoded_batch(
        cfg, codec, ae, untrained, stats, consistency_batch,
        seed=derive_seed(cfg.master_seed, "evaluate-consistency-untrained"))
    cons_u = consistency_rate(videos_u, audio_u, clf, cfg)
    records.append({"step": step, "metric": "consistency_untrained", **cons_u})

    writer = RecordWriter(out_path)
    for rec in records:
        writer.append(rec)
    return records
