"""Two-stage training: autoencoder (stage 1) and latent generator (stage 2).

Every run directory gets a manifest (config, hash, seeds, version), an
append-only JSONL record per step, and checkpoints carrying the config hash.
All randomness flows from per-stage generators derived from the master seed,
and checkpoints persist optimizer plus RNG state so a resumed run continues
the exact trajectory.
"""

from __future__ import annotations

import json
import subprocess
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .archive import (
    RecordWriter,
    arrays_to_optimizer_state,
    load_checkpoint,
    optimizer_state_to_arrays,
    save_checkpoint,
)
from .autoencoder import MultiModalAutoencoder, build_autoencoder, build_discriminator
from .config import RunConfig, config_hash, config_to_dict, derive_seed
from .diffusion import NoiseSchedule, epsilon_loss, q_sample, schedule_from_config
from .dit import JointDiT, build_dit
from .guidance import sample_training_task
from .losses import adversarial_losses, total_autoencoder_loss
from .pixel import build_codec
from .toy import ToyDataset, sample_tensors


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite loss component {component!r} at step {step}")
        self.component = component
        self.step = step


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except Exception:
        return None


def write_run_manifest(out_dir: str | Path, cfg: RunConfig, command: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "master_seed": cfg.master_seed,
        "version": __version__,
        "git": _git_revision(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _rng_state_arrays(gen: torch.Generator, *rngs: np.random.Generator) -> dict[str, np.ndarray]:
    out = {"rng.torch": gen.get_state().numpy()}
    for k, rng in enumerate(rngs):
        state = json.dumps(rng.bit_generator.state)
        out[f"rng.numpy{k}"] = np.frombuffer(state.encode("utf-8"), dtype=np.uint8).copy()
    return out


def _restore_rng(arrays, gen: torch.Generator, *rngs: np.random.Generator) -> None:
    gen.set_state(torch.from_numpy(np.asarray(arrays["rng.torch"])))
    for k, rng in enumerate(rngs):
        state = json.loads(bytes(np.asarray(arrays[f"rng.numpy{k}"])).decode("utf-8"))
        rng.bit_generator.state = state


class GridCache:
    """Lazy per-sample cache of pixel-stage grids and raw tensors."""

    def __init__(self, dataset: ToyDataset, codec, mel_cfg, resolution: int):
        self.dataset = dataset
        self.codec = codec
        self.mel_cfg = mel_cfg
        self.resolution = resolution
        self._grids: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        self._pixels: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def pixels(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        if index not in self._pixels:
            self._pixels[index] = sample_tensors(self.dataset[index], self.mel_cfg, self.resolution)
        return self._pixels[index]

    def grids(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        if index not in self._grids:
            video, audio_img = self.pixels(index)
            with torch.no_grad():
                self._grids[index] = (
                    self.codec.encode(video),
                    self.codec.encode(audio_img),
                )
        return self._grids[index]

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        vids, auds, labels = [], [], []
        for i in indices:
            v, a = self.grids(int(i))
            vids.append(v)
            auds.append(a)
            labels.append(self.dataset.labels[int(i)])
        return (torch.stack(auds), torch.stack(vids), torch.tensor(labels, dtype=torch.long))


def sample_frame_pair(rng: np.random.Generator, frames: int) -> tuple[int, int]:
    i, j = sorted(rng.choice(frames, size=2, replace=False).tolist())
    return int(i), int(j)


def autoencoder_step_losses(
    ae: MultiModalAutoencoder,
    disc,
    audio_grid: torch.Tensor,
    video_grids: torch.Tensor,
    labels: torch.Tensor,
    sched: NoiseSchedule,
    gen: torch.Generator,
    frame_pair: tuple[int, int],
    lambda_gan: float,
) -> dict[str, torch.Tensor]:
    """All stage-1 loss components for one batch.

    The reconstruction term is the noise-prediction MSE over the audio grid
    and the two frames of `frame_pair`; the adversarial tuple reuses those
    decodes through their one-step clean estimates.
    """
    b = audio_grid.shape[0]
    t_max = sched.steps
    dist_a = ae.encode_audio(audio_grid)
    dist_v = ae.encode_video(video_grids)
    z_a = dist_a.sample(gen)
    z_v = dist_v.sample(gen)
    s_a = ae.project_semantic(z_a, "audio")
    s_v = ae.project_semantic(z_v, "video")

    loss_co = ae.contrastive_head.loss(s_a, s_v)
    loss_cl = ae.classification_head.loss(s_a, s_v, labels)
    kl_a = dist_a.kl()
    kl_v = dist_v.kl()

    i, j = frame_pair

    def decode_eps(target, modality, frame_index):
        t = torch.randint(1, t_max + 1, (b,), generator=gen)
        noise = torch.randn(target.shape, generator=gen, dtype=target.dtype)
        x_t = q_sample(target, t, noise, sched)
        s_cross = s_v if modality == "audio" else s_a
        z = z_a if modality == "audio" else z_v
        eps = ae.decode_signal(x_t, t, z, s_cross, modality, labels, frame_index=frame_index)
        ab = sched.gather_alpha_bar(t, x_t)
        x0_hat = (x_t - torch.sqrt(1.0 - ab) * eps) / torch.sqrt(ab)
        return torch.mean((eps - noise) ** 2), x0_hat

    mse_a, fake_a = decode_eps(audio_grid, "audio", None)
    mse_i, fake_i = decode_eps(video_grids[:, i], "video", i)
    mse_j, fake_j = decode_eps(video_grids[:, j], "video", j)
    loss_mse = (mse_a + mse_i + mse_j) / 3.0

    if lambda_gan > 0:
        loss_d, loss_gan_ae = adversarial_losses(
            disc,
            (audio_grid, video_grids[:, i], video_grids[:, j]),
            (fake_a, fake_i, fake_j),
            frame_pair=frame_pair,
        )
    else:
        loss_d = torch.zeros(())
        loss_gan_ae = torch.zeros(())

    return {
        "mse": loss_mse,
        "cl": loss_cl,
        "co": loss_co,
        "kl_a": kl_a,
        "kl_v": kl_v,
        "gan_ae": loss_gan_ae,
        "gan_d": loss_d,
    }


def _check_finite(components: dict[str, torch.Tensor], records: RecordWriter, step: int) -> None:
    for name, value in components.items():
        if not torch.isfinite(value).all():
            records.append({"step": step, "event": "non_finite", "component": name})
            raise TrainingDiverged(name, step)


@torch.no_grad()
def reconstruction_eval(
    ae: MultiModalAutoencoder,
    codec,
    cache: GridCache,
    indices,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
) -> dict[str, float]:
    """Pixel-space reconstruction error of the DDIM decode on given samples.

    Uses latent means and a local generator so it never disturbs training RNG.
    """
    audio_grid, video_grids, labels = cache.batch(indices)
    z_a = ae.encode_audio(audio_grid).mean
    z_v = ae.encode_video(video_grids).mean
    gen = torch.Generator().manual_seed(seed)
    grid_a_hat, grids_v_hat = ae.reconstruct(z_a, z_v, labels, sched, steps=steps, generator=gen)
    video_hat = codec.decode(grids_v_hat)
    audio_hat = codec.decode(grid_a_hat)
    video_ref = torch.stack([cache.pixels(int(i))[0] for i in indices])
    audio_ref = torch.stack([cache.pixels(int(i))[1] for i in indices])
    mse_v = float(torch.mean((video_hat - video_ref) ** 2))
    mse_a = float(torch.mean((audio_hat - audio_ref) ** 2))
    # pixel range is [-1, 1]: peak-to-peak of 2
    psnr_v = 10.0 * float(np.log10(4.0 / max(mse_v, 1e-12)))
    psnr_a = 10.0 * float(np.log10(4.0 / max(mse_a, 1e-12)))
    return {"video_mse": mse_v, "audio_mse": mse_a, "video_psnr": psnr_v, "audio_psnr": psnr_a}


def _save_ae_checkpoint(path, ae, disc, opt_ae, opt_d, gen, data_rng, step, cfg):
    params = {f"ae.{k}": v for k, v in ae.state_dict().items()}
    params.update({f"disc.{k}": v for k, v in disc.state_dict().items()})
    optim = {f"opt_ae.{k}": v for k, v in optimizer_state_to_arrays(opt_ae).items()}
    optim.update({f"opt_d.{k}": v for k, v in optimizer_state_to_arrays(opt_d).items()})
    optim.update(_rng_state_arrays(gen, data_rng))
    manifest = {
        "kind": "autoencoder",
        "config_hash": config_hash(cfg),
        "step": step,
        "grid_size": cfg.data.resolution // cfg.pixel.factor,
        "master_seed": cfg.master_seed,
    }
    return save_checkpoint(path, params, manifest, optim)


def build_models(cfg: RunConfig):
    """Codec + autoencoder + discriminator with seeded initialization."""
    torch.manual_seed(derive_seed(cfg.master_seed, "ae-init"))
    codec = build_codec(cfg.pixel)
    grid_size = cfg.data.resolution // cfg.pixel.factor
    ae = build_autoencoder(codec.channels, grid_size, cfg.data.frames,
                           cfg.data.classes, cfg.autoencoder)
    disc = build_discriminator(codec.channels, cfg.autoencoder)
    return codec, ae, disc


def load_autoencoder(cfg: RunConfig, ckpt_dir: str | Path, force: bool = False):
    """Rebuild codec + autoencoder and load checkpoint parameters."""
    params, manifest, _ = load_checkpoint(ckpt_dir, expected_config_hash=config_hash(cfg),
                                          force=force)
    codec, ae, disc = build_models(cfg)
    ae.load_state_dict({k[3:]: v for k, v in params.items() if k.startswith("ae.")})
    disc.load_state_dict({k[5:]: v for k, v in params.items() if k.startswith("disc.")})
    ae.eval()
    return codec, ae, disc, manifest


def train_autoencoder(cfg: RunConfig, dataset: ToyDataset, out_dir: str | Path,
                      resume: str | Path | None = None, progress: bool = False) -> Path:
    """Stage-1 loop: alternating autoencoder / discriminator updates."""
    out_dir = Path(out_dir)
    write_run_manifest(out_dir, cfg, "train-ae")
    records = RecordWriter(out_dir / "records.jsonl")
    tc = cfg.autoencoder.train
    acfg = cfg.autoencoder

    codec, ae, disc = build_models(cfg)
    opt_ae = torch.optim.AdamW(ae.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = schedule_from_config(acfg.schedule)
    gen = torch.Generator().manual_seed(derive_seed(cfg.master_seed, "ae-train"))
    data_rng = np.random.default_rng(derive_seed(cfg.master_seed, "ae-data"))

    start_step = 0
    if resume is not None:
        params, manifest, optim = load_checkpoint(resume, expected_config_hash=config_hash(cfg))
        ae.load_state_dict({k[3:]: v for k, v in params.items() if k.startswith("ae.")})
        disc.load_state_dict({k[5:]: v for k, v in params.items() if k.startswith("disc.")})
        opt_ae.load_state_dict(arrays_to_optimizer_state(
            {k[7:]: v for k, v in optim.items() if k.startswith("opt_ae.")}))
        opt_d.load_state_dict(arrays_to_optimizer_state(
            {k[6:]: v for k, v in optim.items() if k.startswith("opt_d.")}))
        _restore_rng(optim, gen, data_rng)
        start_step = int(manifest["step"])

    cache = GridCache(dataset, codec, cfg.mel, cfg.data.resolution)
    train_idx = dataset.train_indices
    batch_stream = iter(_batch_stream(len(train_idx), tc.batch_size, data_rng))
    iterator = range(start_step + 1, tc.steps + 1)
    if progress:
        from tqdm import tqdm
        iterator = tqdm(iterator, desc="train-ae")

    last_ckpt: Path | None = None
    for step in iterator:
        sel = next(batch_stream)
        indices = [int(train_idx[k]) for k in sel]
        audio_grid, video_grids, labels = cache.batch(indices)
        frame_pair = sample_frame_pair(data_rng, cfg.data.frames)

        parts = autoencoder_step_losses(ae, disc, audio_grid, video_grids, labels,
                                        sched, gen, frame_pair, acfg.lambda_gan)
        total = total_autoencoder_loss(
            parts["mse"], parts["cl"], parts["co"], parts["kl_a"], parts["kl_v"],
            parts["gan_ae"], acfg.lambda_cl, acfg.lambda_co, acfg.lambda_kl, acfg.lambda_gan)
        _check_finite({**parts, "total": total}, records, step)

        opt_ae.zero_grad(set_to_none=True)
        total.backward()
        opt_ae.step()
        if acfg.lambda_gan > 0:
            opt_d.zero_grad(set_to_none=True)
            parts["gan_d"].backward()
            opt_d.step()

        record = {"step": step, "total": float(total.detach())}
        record.update({k: float(v.detach()) for k, v in parts.items()})
        record.update({"lambda_cl": acfg.lambda_cl, "lambda_co": acfg.lambda_co,
                       "lambda_kl": acfg.lambda_kl, "lambda_gan": acfg.lambda_gan})
        records.append(record)

        hit_target = False
        if tc.eval_every and (step % tc.eval_every == 0 or step == tc.steps):
            metrics = reconstruction_eval(
                ae, codec, cache, train_idx, sched, tc.eval_ddim_steps,
                seed=derive_seed(cfg.master_seed, "ae-eval"))
            records.append({"step": step, "event": "eval", **metrics})
            hit_target = (tc.target_mse > 0
                          and max(metrics["video_mse"], metrics["audio_mse"]) < tc.target_mse)

        if (tc.ckpt_every and step % tc.ckpt_every == 0) or step == tc.steps or hit_target:
            last_ckpt = _save_ae_checkpoint(
                out_dir / "checkpoints" / f"step_{step:06d}",
                ae, disc, opt_ae, opt_d, gen, data_rng, step, cfg)
        if hit_target:
            break

    assert last_ckpt is not None
    return last_ckpt


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# stage 2: joint latent generator


def encode_sample_latent(ae: MultiModalAutoencoder, cache: GridCache, index: int):
    """Frozen-encoder latent distribution for one sample (batch size 1)."""
    with torch.no_grad():
        video_grids, audio_grid = cache.grids(index)
        dist_a = ae.encode_audio(audio_grid[None])
        dist_v = ae.encode_video(video_grids[None])
    return (dist_a.mean[0].numpy(), dist_a.logvar[0].numpy(),
            dist_v.mean[0].numpy(), dist_v.logvar[0].numpy())


def compute_latent_table(ae, cache: GridCache, indices) -> dict[int, tuple]:
    return {int(i): encode_sample_latent(ae, cache, int(i)) for i in indices}


def latent_stats(table: dict[int, tuple]) -> dict[str, float]:
    means_a = np.stack([v[0] for v in table.values()])
    means_v = np.stack([v[2] for v in table.values()])
    return {
        "audio_mean": float(means_a.mean()),
        "audio_std": float(max(means_a.std(), 1e-6)),
        "video_mean": float(means_v.mean()),
        "video_std": float(max(means_v.std(), 1e-6)),
    }


def build_dit_from_config(cfg: RunConfig) -> JointDiT:
    depth, width, heads = cfg.dit.dims()
    torch.manual_seed(derive_seed(cfg.master_seed, "dit-init"))
    return build_dit(cfg.audio_latent_shape(), cfg.video_latent_shape(),
                     cfg.dit.patch, depth, width, heads)


def load_dit(cfg: RunConfig, ckpt_dir: str | Path, force: bool = False):
    params, manifest, _ = load_checkpoint(ckpt_dir, expected_config_hash=config_hash(cfg),
                                          force=force)
    dit = build_dit_from_config(cfg)
    dit.load_state_dict({k[4:]: v for k, v in params.items() if k.startswith("dit.")})
    dit.eval()
    return dit, manifest


def _save_dit_checkpoint(path, dit, opt, gen, data_rng, task_rng, step, cfg, stats):
    params = {f"dit.{k}": v for k, v in dit.state_dict().items()}
    optim = {f"opt.{k}": v for k, v in optimizer_state_to_arrays(opt).items()}
    optim.update(_rng_state_arrays(gen, data_rng, task_rng))
    manifest = {
        "kind": "dit",
        "config_hash": config_hash(cfg),
        "step": step,
        "latent_stats": stats,
        "master_seed": cfg.master_seed,
    }
    return save_checkpoint(path, params, manifest, optim)


def train_dit(cfg: RunConfig, dataset: ToyDataset, ae_ckpt: str | Path,
              out_dir: str | Path, resume: str | Path | None = None,
              force: bool = False, progress: bool = False) -> Path:
    """Stage-2 loop: joint epsilon objective with 90/5/5 task mixing."""
    out_dir = Path(out_dir)
    write_run_manifest(out_dir, cfg, "train-dit")
    records = RecordWriter(out_dir / "records.jsonl")
    tc = cfg.dit.train

    codec, ae, _, _ = load_autoencoder(cfg, ae_ckpt, force=force)
    for p in ae.parameters():
        p.requires_grad_(False)
    cache = GridCache(dataset, codec, cfg.mel, cfg.data.resolution)
    train_idx = [int(i) for i in dataset.train_indices]

    cached_mode = tc.latent_mode == "cached"
    table = compute_latent_table(ae, cache, train_idx)
    stats = latent_stats(table)
    if not cached_mode:
        table = None  # encode on the fly each step

    dit = build_dit_from_config(cfg)
    opt = torch.optim.AdamW(dit.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = schedule_from_config(cfg.dit.schedule)
    gen = torch.Generator().manual_seed(derive_seed(cfg.master_seed, "dit-train"))
    data_rng = np.random.default_rng(derive_seed(cfg.master_seed, "dit-data"))
    task_rng = np.random.default_rng(derive_seed(cfg.master_seed, "dit-task"))

    start_step = 0
    if resume is not None:
        params, manifest, optim = load_checkpoint(resume, expected_config_hash=config_hash(cfg))
        dit.load_state_dict({k[4:]: v for k, v in params.items() if k.startswith("dit.")})
        opt.load_state_dict(arrays_to_optimizer_state(
            {k[4:]: v for k, v in optim.items() if k.startswith("opt.")}))
        _restore_rng(optim, gen, data_rng, task_rng)
        start_step = int(manifest["step"])
        stats = manifest["latent_stats"]

    def latent_for(index: int):
        if cached_mode:
            return table[index]
        return encode_sample_latent(ae, cache, index)

    batch_stream = iter(_batch_stream(len(train_idx), tc.batch_size, data_rng))
    iterator = range(start_step + 1, tc.steps + 1)
    if progress:
        from tqdm import tqdm
        iterator = tqdm(iterator, desc="train-dit")

    last_ckpt: Path | None = None
    for step in iterator:
        sel = next(batch_stream)
        rows = [latent_for(train_idx[int(k)]) for k in sel]
        mean_a = torch.from_numpy(np.stack([r[0] for r in rows]))
        logvar_a = torch.from_numpy(np.stack([r[1] for r in rows]))
        mean_v = torch.from_numpy(np.stack([r[2] for r in rows]))
        logvar_v = torch.from_numpy(np.stack([r[3] for r in rows]))
        b = mean_a.shape[0]

        def reparam(mean, logvar):
            noise = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
            return mean + torch.exp(0.5 * logvar) * noise

        z_a = (reparam(mean_a, logvar_a) - stats["audio_mean"]) / stats["audio_std"]
        z_v = (reparam(mean_v, logvar_v) - stats["video_mean"]) / stats["video_std"]

        cond_a = torch.zeros_like(z_a)
        cond_v = torch.zeros_like(z_v)
        counts = {"svg": 0, "a2v": 0, "v2a": 0}
        for r in range(b):
            pair = sample_training_task(task_rng, z_a[r], z_v[r],
                                        cond_prob=cfg.dit.cond_task_prob)
            counts[pair.task] += 1
            if pair.task == "a2v":
                cond_a[r] = pair.cond_audio
            elif pair.task == "v2a":
                cond_v[r] = pair.cond_video

        t = torch.randint(1, sched.steps + 1, (b,), generator=gen)
        noise_a = torch.randn(z_a.shape, generator=gen, dtype=z_a.dtype)
        noise_v = torch.randn(z_v.shape, generator=gen, dtype=z_v.dtype)
        x_a = q_sample(z_a, t, noise_a, sched)
        x_v = q_sample(z_v, t, noise_v, sched)

        pred_a, pred_v = dit(x_a, x_v, t, cond_a=cond_a, cond_v=cond_v)
        loss = epsilon_loss((pred_a, pred_v), (noise_a, noise_v))
        _check_finite({"loss": loss}, records, step)

        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        records.append({"step": step, "loss": float(loss.detach()),
                        "task_svg": counts["svg"], "task_a2v": counts["a2v"],
                        "task_v2a": counts["v2a"]})

        if (tc.ckpt_every and step % tc.ckpt_every == 0) or step == tc.steps:
            last_ckpt = _save_dit_checkpoint(
                out_dir / "checkpoints" / f"step_{step:06d}",
                dit, opt, gen, data_rng, task_rng, step, cfg, stats)

    assert last_ckpt is not None
    return last_ckpt
