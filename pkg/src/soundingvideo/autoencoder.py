"""Hierarchical multi-modal autoencoder.

Modal-specific encoders compress pixel-stage grids into perceptual latents
(audio: C x (G/f_a)^2, video: per-frame C x (G/f_v)^2 stacked over frames).
Projectors map latents into a shared semantic token space scored by a
contrastive head and a classification head. One conditional noise-prediction
UNet, shared across modalities, decodes grids from latents; a tuple
discriminator scores (audio, frame_i, frame_j) triples for the adversarial
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .blocks import (
    Attention,
    Downsample,
    ResBlock2d,
    SpatialCrossAttention,
    TemporalAttention,
    TimeEmbedding,
    Upsample,
    norm_layer,
    zero_module,
)
from .config import AutoencoderConfig
from .diffusion import NoiseSchedule, ddim_sample
from .losses import classification_loss_from_logits, info_nce_pair_loss, kl_to_standard_normal

MODALITY_INDEX = {"audio": 0, "video": 1}


class ShapeError(ValueError):
    pass


class DecodeError(ValueError):
    pass


@dataclass
class GaussianLatent:
    """Diagonal Gaussian over a perceptual latent (reparameterized sampling)."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        noise = torch.randn(self.mean.shape, generator=generator,
                            dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(0.5 * self.logvar) * noise

    def kl(self) -> torch.Tensor:
        return kl_to_standard_normal(self.mean, self.logvar)


def _n_down(factor: int, name: str) -> int:
    n = int(round(math.log2(factor)))
    if 2**n != factor or factor < 1:
        raise ShapeError(f"{name} must be a positive power of two, got {factor}")
    return n


class AudioEncoder(nn.Module):
    def __init__(self, in_channels: int, latent_channels: int, factor: int,
                 base: int = 64, mults: tuple[int, ...] = (1, 2), blocks: int = 2):
        super().__init__()
        n_down = _n_down(factor, "audio factor")
        self.factor = factor
        self.latent_channels = latent_channels
        self.stem = nn.Conv2d(in_channels, base, 1)
        widths = [base * mults[min(s, len(mults) - 1)] for s in range(n_down + 1)]
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = base
        for s, w in enumerate(widths):
            self.stages.append(nn.ModuleList([ResBlock2d(ch if b == 0 else w, w)
                                              for b in range(blocks)]))
            ch = w
            if s < n_down:
                self.downs.append(Downsample(w, widths[s + 1]))
                ch = widths[s + 1]
        self.out_norm = norm_layer(widths[-1])
        self.out = nn.Conv2d(widths[-1], 2 * latent_channels, 3, padding=1)

    def forward(self, grid: torch.Tensor) -> GaussianLatent:
        if grid.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) grid, got {tuple(grid.shape)}")
        h = self.stem(grid)
        for s, stage in enumerate(self.stages):
            for res in stage:
                h = res(h)
            if s < len(self.downs):
                h = self.downs[s](h)
        out = self.out(F.silu(self.out_norm(h)))
        mean, logvar = out.chunk(2, dim=1)
        expect = (grid.shape[-2] // self.factor, grid.shape[-1] // self.factor)
        assert mean.shape[-2:] == expect and mean.shape[1] == self.latent_channels, \
            f"audio latent {tuple(mean.shape[1:])} != ({self.latent_channels}, {expect})"
        return GaussianLatent(mean=mean, logvar=logvar)


class VideoEncoder(nn.Module):
    """Per-frame encoder with temporal attention mixing between stages."""

    def __init__(self, in_channels: int, latent_channels: int, factor: int, frames: int,
                 base: int = 64, mults: tuple[int, ...] = (1, 2), blocks: int = 2):
        super().__init__()
        n_down = _n_down(factor, "video factor")
        self.factor = factor
        self.latent_channels = latent_channels
        self.frames = frames
        self.stem = nn.Conv2d(in_channels, base, 1)
        widths = [base * mults[min(s, len(mults) - 1)] for s in range(n_down + 1)]
        self.stages = nn.ModuleList()
        self.temporal = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = base
        for s, w in enumerate(widths):
            self.stages.append(nn.ModuleList([ResBlock2d(ch if b == 0 else w, w)
                                              for b in range(blocks)]))
            self.temporal.append(TemporalAttention(w, frames))
            ch = w
            if s < n_down:
                self.downs.append(Downsample(w, widths[s + 1]))
                ch = widths[s + 1]
        self.out_norm = norm_layer(widths[-1])
        self.out = nn.Conv2d(widths[-1], 2 * latent_channels, 3, padding=1)

    def forward(self, grids: torch.Tensor) -> GaussianLatent:
        if grids.ndim != 5:
            raise ShapeError(f"expected (B, F, C, H, W) grids, got {tuple(grids.shape)}")
        b, f = grids.shape[:2]
        if f != self.frames:
            raise ShapeError(f"expected {self.frames} frames, got {f}")
        h = self.stem(grids.reshape(b * f, *grids.shape[2:]))
        for s, stage in enumerate(self.stages):
            for res in stage:
                h = res(h)
            h = rearrange(h, "(b f) c x y -> b f c x y", b=b)
            h = self.temporal[s](h)
            h = rearrange(h, "b f c x y -> (b f) c x y")
            if s < len(self.downs):
                h = self.downs[s](h)
        out = self.out(F.silu(self.out_norm(h)))
        mean, logvar = out.chunk(2, dim=1)
        mean = rearrange(mean, "(b f) c x y -> b f c x y", b=b)
        logvar = rearrange(logvar, "(b f) c x y -> b f c x y", b=b)
        expect = (grids.shape[-2] // self.factor, grids.shape[-1] // self.factor)
        assert mean.shape[-2:] == expect and mean.shape[2] == self.latent_channels, \
            f"video latent {tuple(mean.shape[2:])} != ({self.latent_channels}, {expect})"
        return GaussianLatent(mean=mean, logvar=logvar)


class AudioProjector(nn.Module):
    """Audio latent -> N_s x d_s semantic tokens (pooled spatial grid)."""

    def __init__(self, latent_channels: int, num_tokens: int, dim: int):
        super().__init__()
        side = int(round(num_tokens ** 0.5))
        if side * side != num_tokens:
            raise ShapeError("num_tokens must be a perfect square for the audio projector")
        self.side = side
        self.body = ResBlock2d(latent_channels, latent_channels)
        self.proj = nn.Sequential(nn.Linear(latent_channels, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.norm = nn.LayerNorm(dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.body(z)
        h = F.adaptive_avg_pool2d(h, (self.side, self.side))
        tokens = rearrange(h, "b c x y -> b (x y) c")
        return self.norm(self.proj(tokens))


class VideoProjector(nn.Module):
    """Video latent stack -> one semantic token per frame."""

    def __init__(self, latent_channels: int, frames: int, dim: int):
        super().__init__()
        self.frames = frames
        self.body = ResBlock2d(latent_channels, latent_channels)
        self.proj = nn.Sequential(nn.Linear(latent_channels, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.mix = Attention(dim, heads=4)
        self.norm = nn.LayerNorm(dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 5 or z.shape[1] != self.frames:
            raise ShapeError(f"expected (B, {self.frames}, C, h, w) latents, got {tuple(z.shape)}")
        b = z.shape[0]
        h = self.body(z.reshape(-1, *z.shape[2:]))
        tokens = rearrange(h.mean(dim=(-2, -1)), "(b f) c -> b f c", b=b)
        tokens = self.proj(tokens)
        tokens = tokens + self.mix(tokens)
        return self.norm(tokens)


class ContrastiveHead(nn.Module):
    """Maps semantic tokens to 1-D features and scores matched pairs.

    The temperature is learnable on a log scale, initialized to 1/0.07.
    """

    def __init__(self, dim: int, contrast_dim: int, temperature_init: float):
        super().__init__()
        self.proj = nn.Linear(dim, contrast_dim)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(temperature_init)))

    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens.mean(dim=1))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def loss(self, s_audio: torch.Tensor, s_video: torch.Tensor) -> torch.Tensor:
        return info_nce_pair_loss(self.features(s_audio), self.features(s_video),
                                  self.temperature)


class ClassificationHead(nn.Module):
    """Predicts the class label from the fused (audio, video) semantic pair."""

    def __init__(self, dim: int, classes: int, hidden: int):
        super().__init__()
        self.classes = classes
        self.mlp = nn.Sequential(nn.Linear(2 * dim, hidden), nn.SiLU(), nn.Linear(hidden, classes))

    def logits(self, s_audio: torch.Tensor, s_video: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.cat([s_audio.mean(dim=1), s_video.mean(dim=1)], dim=-1))

    def loss(self, s_audio: torch.Tensor, s_video: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return classification_loss_from_logits(self.logits(s_audio, s_video), labels)


class ConditionPyramid(nn.Module):
    """Multi-scale features from a latent slice, upsampled to the UNet stages.

    Shared by both modalities: the chain walks from the latent resolution up
    to the grid resolution, emitting a feature wherever a UNet encoder stage
    lives. Blocks are indexed by distance from the grid resolution so audio
    (smaller latents) simply uses more of the chain than video.
    """

    def __init__(self, latent_channels: int, width: int, max_levels: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(latent_channels, width, 1), ResBlock2d(width, width))
        self.ups = nn.ModuleList([
            nn.ModuleList([Upsample(width, width), ResBlock2d(width, width)])
            for _ in range(max_levels)
        ])

    def forward(self, z_slice: torch.Tensor, grid_size: int,
                wanted_sizes: set[int]) -> dict[int, torch.Tensor]:
        h = self.stem(z_slice)
        size = z_slice.shape[-1]
        feats: dict[int, torch.Tensor] = {}
        if size in wanted_sizes:
            feats[size] = h
        while size < grid_size:
            size *= 2
            level = int(round(math.log2(grid_size / size)))
            up, res = self.ups[level]
            h = res(up(h))
            if size in wanted_sizes:
                feats[size] = h
        return feats


class SignalDecoder(nn.Module):
    """Conditional noise-prediction UNet shared across modalities.

    Conditioning pathways: multi-scale residual features from the latent are
    added to the encoder-stage outputs; the spatially pooled latent joins the
    time embedding (as does the frame-index embedding for video); the
    cross-modal semantic tokens, modality embedding and class embedding form
    the cross-attention context. The output convolution is zero-initialized.
    """

    def __init__(self, grid_channels: int, latent_channels: int, grid_size: int,
                 audio_factor: int, video_factor: int, frames: int, classes: int,
                 semantic_dim: int, base: int = 64, mults: tuple[int, ...] = (1, 2),
                 blocks: int = 2, cond_base: int = 64):
        super().__init__()
        self.grid_channels = grid_channels
        self.grid_size = grid_size
        self.frames = frames
        n_stages = len(mults)
        widths = [base * m for m in mults]
        self.stage_sizes = [grid_size // (2**s) for s in range(n_stages)]

        temb_dim = base * 4
        self.time_embed = TimeEmbedding(base, temb_dim)
        self.frame_embed = nn.Embedding(frames, temb_dim)
        self.modality_embed = nn.Embedding(2, semantic_dim)
        self.class_embed = nn.Embedding(classes, semantic_dim)
        self.content_proj = nn.Linear(latent_channels, temb_dim)

        max_levels = int(round(math.log2(max(audio_factor, video_factor))))
        self.cond_pyramid = ConditionPyramid(latent_channels, cond_base, max_levels)
        self.cond_proj = nn.ModuleList([nn.Conv2d(cond_base, w, 1) for w in widths])

        self.stem = nn.Conv2d(grid_channels, base, 1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = base
        for s, w in enumerate(widths):
            self.down_res.append(nn.ModuleList(
                [ResBlock2d(ch if b == 0 else w, w, temb_dim) for b in range(blocks)]))
            self.down_attn.append(SpatialCrossAttention(w, semantic_dim))
            ch = w
            if s < n_stages - 1:
                self.downs.append(Downsample(w, widths[s + 1]))
                ch = widths[s + 1]

        self.mid_res1 = ResBlock2d(widths[-1], widths[-1], temb_dim)
        self.mid_attn = SpatialCrossAttention(widths[-1], semantic_dim)
        self.mid_res2 = ResBlock2d(widths[-1], widths[-1], temb_dim)

        self.ups = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for s in range(n_stages - 1, -1, -1):
            w = widths[s]
            self.ups.append(Upsample(widths[s + 1], w) if s < n_stages - 1 else nn.Identity())
            self.up_res.append(ResBlock2d(2 * w, w, temb_dim))
            self.up_attn.append(SpatialCrossAttention(w, semantic_dim))

        self.out_norm = norm_layer(base)
        self.out = zero_module(nn.Conv2d(base, grid_channels, 3, padding=1))

    def _context(self, s_cross: torch.Tensor, modality: str, class_idx: torch.Tensor) -> torch.Tensor:
        b = s_cross.shape[0]
        mod = self.modality_embed.weight[MODALITY_INDEX[modality]].expand(b, 1, -1)
        cls = self.class_embed(class_idx)[:, None, :]
        return torch.cat([s_cross, mod, cls], dim=1)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, z: torch.Tensor,
                s_cross: torch.Tensor, modality: str, class_idx: torch.Tensor,
                frame_index: torch.Tensor | int | None = None) -> torch.Tensor:
        if modality not in MODALITY_INDEX:
            raise DecodeError(f"unknown modality {modality!r}")
        b = x_t.shape[0]
        if x_t.shape[-1] != self.grid_size or x_t.shape[1] != self.grid_channels:
            raise ShapeError(f"expected grid (B, {self.grid_channels}, {self.grid_size}, "
                             f"{self.grid_size}), got {tuple(x_t.shape)}")
        if modality == "video":
            if frame_index is None:
                raise DecodeError("frame_index is required for video decoding")
            if isinstance(frame_index, int):
                frame_index = torch.full((b,), frame_index, dtype=torch.long, device=x_t.device)
            if frame_index.min() < 0 or frame_index.max() >= self.frames:
                raise DecodeError(f"frame_index out of range [0, {self.frames})")
            if z.ndim != 5:
                raise ShapeError("video latents must be (B, F, C, h, w)")
            z_slice = z[torch.arange(b, device=z.device), frame_index]
            content = z.mean(dim=(1, 3, 4))
        else:
            if frame_index is not None:
                raise DecodeError("frame_index must be omitted for audio decoding")
            if z.ndim != 4:
                raise ShapeError("audio latents must be (B, C, h, w)")
            z_slice = z
            content = z.mean(dim=(2, 3))

        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.long, device=x_t.device)
        temb = self.time_embed(t) + self.content_proj(content)
        if modality == "video":
            temb = temb + self.frame_embed(frame_index)
        ctx = self._context(s_cross, modality, class_idx)
        cond_feats = self.cond_pyramid(z_slice, self.grid_size, set(self.stage_sizes))

        h = self.stem(x_t)
        skips = []
        for s, res_blocks in enumerate(self.down_res):
            for res in res_blocks:
                h = res(h, temb)
            h = self.down_attn[s](h, ctx)
            h = h + self.cond_proj[s](cond_feats[self.stage_sizes[s]])
            skips.append(h)
            if s < len(self.downs):
                h = self.downs[s](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, ctx)
        h = self.mid_res2(h, temb)

        for k in range(len(self.up_res)):
            h = self.ups[k](h)
            h = torch.cat([h, skips.pop()], dim=1)
            h = self.up_res[k](h, temb)
            h = self.up_attn[k](h, ctx)

        out = self.out(F.silu(self.out_norm(h)))
        assert out.shape == x_t.shape
        return out


class TupleDiscriminator(nn.Module):
    """Scores (audio, frame_i, frame_j) grid triples with one real-logit.

    Spatio-temporal modules: per-element residual blocks followed by full
    attention across every position of every element; slot embeddings make
    the element order (and thus frame order) distinguishable.
    """

    def __init__(self, grid_channels: int, base: int = 64, blocks: int = 2, heads: int = 4):
        super().__init__()
        self.stem = nn.Conv2d(grid_channels, base, 1)
        self.slot_embed = nn.Parameter(torch.zeros(3, base))
        nn.init.normal_(self.slot_embed, std=0.02)
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = base
        for b in range(blocks):
            self.res.append(ResBlock2d(ch, ch))
            self.attn.append(Attention(ch, heads=heads))
            self.norms.append(nn.LayerNorm(ch))
            if b < blocks - 1:
                self.downs.append(Downsample(ch, ch * 2))
                ch = ch * 2
        self.head_norm = norm_layer(ch)
        self.head = nn.Linear(ch, 1)

    def forward(self, audio: torch.Tensor, frame_i: torch.Tensor, frame_j: torch.Tensor) -> torch.Tensor:
        if not audio.shape == frame_i.shape == frame_j.shape:
            raise ShapeError("tuple elements must share one grid shape")
        b = audio.shape[0]
        x = torch.stack([audio, frame_i, frame_j], dim=1)  # (B, 3, C, H, W)
        h = self.stem(x.reshape(b * 3, *x.shape[2:]))
        h = h + self.slot_embed.repeat(b, 1).reshape(b * 3, -1)[:, :, None, None].to(h.dtype)
        for k in range(len(self.res)):
            h = self.res[k](h)
            tokens = rearrange(h, "(b e) c x y -> b (e x y) c", b=b)
            tokens = tokens + self.attn[k](self.norms[k](tokens))
            h = rearrange(tokens, "b (e x y) c -> (b e) c x y",
                          e=3, x=h.shape[-2], y=h.shape[-1])
            if k < len(self.downs):
                h = self.downs[k](h)
        h = F.silu(self.head_norm(h)).mean(dim=(-2, -1))
        return self.head(h.reshape(b, 3, -1).mean(dim=1)).squeeze(-1)


class MultiModalAutoencoder(nn.Module):
    """Encoders, projectors, heads and the shared signal decoder."""

    def __init__(self, grid_channels: int, grid_size: int, frames: int, classes: int,
                 cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.grid_channels = grid_channels
        self.grid_size = grid_size
        self.frames = frames
        self.classes = classes
        C = cfg.latent_channels
        enc = cfg.encoder
        self.audio_encoder = AudioEncoder(grid_channels, C, cfg.audio_factor,
                                          base=enc.base, mults=enc.mults, blocks=enc.blocks)
        self.video_encoder = VideoEncoder(grid_channels, C, cfg.video_factor, frames,
                                          base=enc.base, mults=enc.mults, blocks=enc.blocks)
        sem = cfg.semantic
        self.audio_projector = AudioProjector(C, sem.num_tokens, sem.dim)
        self.video_projector = VideoProjector(C, frames, sem.dim)
        self.contrastive_head = ContrastiveHead(sem.dim, sem.contrast_dim, cfg.temperature_init)
        self.classification_head = ClassificationHead(sem.dim, classes, sem.class_hidden)
        dec = cfg.decoder
        self.decoder = SignalDecoder(
            grid_channels, C, grid_size, cfg.audio_factor, cfg.video_factor, frames,
            classes, sem.dim, base=dec.base, mults=dec.mults, blocks=dec.blocks,
            cond_base=dec.cond_base,
        )

    # encoding -------------------------------------------------------------
    def encode_audio(self, grid: torch.Tensor) -> GaussianLatent:
        if grid.shape[-1] != self.grid_size:
            raise ShapeError(f"audio grid size {grid.shape[-1]} != {self.grid_size}")
        return self.audio_encoder(grid)

    def encode_video(self, grids: torch.Tensor) -> GaussianLatent:
        if grids.shape[-1] != self.grid_size:
            raise ShapeError(f"video grid size {grids.shape[-1]} != {self.grid_size}")
        return self.video_encoder(grids)

    def project_semantic(self, z: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "audio":
            return self.audio_projector(z)
        if modality == "video":
            return self.video_projector(z)
        raise DecodeError(f"unknown modality {modality!r}")

    # decoding -------------------------------------------------------------
    def decode_signal(self, x_t, t, z, s_cross, modality, class_idx, frame_index=None):
        return self.decoder(x_t, t, z, s_cross, modality, class_idx, frame_index=frame_index)

    @torch.no_grad()
    def reconstruct(
        self,
        z_audio: torch.Tensor,
        z_video: torch.Tensor,
        class_idx: torch.Tensor,
        sched: NoiseSchedule,
        steps: int = 50,
        generator: torch.Generator | None = None,
        chunk: int = 256,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """DDIM-decode grids for a batch of latent pairs."""
        b = z_audio.shape[0]
        f = self.frames
        g = self.grid_size
        c = self.grid_channels
        dtype = z_audio.dtype
        s_audio = self.project_semantic(z_audio, "audio")
        s_video = self.project_semantic(z_video, "video")

        device = z_audio.device
        noise_a = torch.randn((b, c, g, g), generator=generator, dtype=dtype).to(device)
        noise_v = torch.randn((b * f, c, g, g), generator=generator, dtype=dtype).to(device)

        def eps_audio(x, t):
            return self.decoder(x, t, z_audio, s_video, "audio", class_idx)

        grid_a = ddim_sample(eps_audio, noise_a, sched, steps)

        z_rep = z_video.repeat_interleave(f, dim=0)
        s_rep = s_audio.repeat_interleave(f, dim=0)
        cls_rep = class_idx.repeat_interleave(f, dim=0)
        fidx = torch.arange(f).repeat(b)
        outs = []
        for lo in range(0, b * f, chunk):
            hi = min(lo + chunk, b * f)

            def eps_video(x, t, lo=lo, hi=hi):
                return self.decoder(x, t, z_rep[lo:hi], s_rep[lo:hi], "video",
                                    cls_rep[lo:hi], frame_index=fidx[lo:hi])

            outs.append(ddim_sample(eps_video, noise_v[lo:hi], sched, steps))
        grids_v = torch.cat(outs, dim=0).reshape(b, f, c, g, g)
        return grid_a, grids_v


def build_autoencoder(grid_channels: int, grid_size: int, frames: int, classes: int,
                      cfg: AutoencoderConfig) -> MultiModalAutoencoder:
    return MultiModalAutoencoder(grid_channels, grid_size, frames, classes, cfg)


def build_discriminator(grid_channels: int, cfg: AutoencoderConfig) -> TupleDiscriminator:
    return TupleDiscriminator(grid_channels, base=cfg.discriminator.base,
                              blocks=cfg.discriminator.blocks)
