"""Joint noise predictor over concatenated audio and video latent tokens.

Audio latents rasterize to one token per spatial position; video latents are
patchified per frame. Each modality gets its own learned positional
embeddings, and learnable end-of-sequence tokens are inserted before the
audio span and before the video span. All tokens attend to all tokens (full
self-attention, no windowing); timesteps condition every block through
adaptive layer norm. Condition latents (for audio-to-video / video-to-audio
tasks) enter through zero-initialized, bias-free linear projections added to
the token embeddings, so a null (all-zero) condition is exactly a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .blocks import Attention, TimeEmbedding

MODALITIES = ("audio", "video")


class TokenLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLayout:
    """Manifest mapping latent tensors to spans of the token sequence."""

    audio_shape: tuple[int, int, int]        # (C, Ha, Wa)
    video_shape: tuple[int, int, int, int]   # (F, C, Hv, Wv)
    patch: int

    @property
    def audio_tokens(self) -> int:
        _, h, w = self.audio_shape
        return h * w

    @property
    def video_tokens(self) -> int:
        f, _, h, w = self.video_shape
        return f * (h // self.patch) * (w // self.patch)

    @property
    def audio_dim(self) -> int:
        return self.audio_shape[0]

    @property
    def video_dim(self) -> int:
        return self.video_shape[1] * self.patch * self.patch

    @property
    def token_dim(self) -> int:
        return max(self.audio_dim, self.video_dim)

    @property
    def eos_audio(self) -> int:
        return 0

    @property
    def audio_span(self) -> tuple[int, int]:
        return (1, 1 + self.audio_tokens)

    @property
    def eos_video(self) -> int:
        return 1 + self.audio_tokens

    @property
    def video_span(self) -> tuple[int, int]:
        start = 2 + self.audio_tokens
        return (start, start + self.video_tokens)

    @property
    def length(self) -> int:
        return 2 + self.audio_tokens + self.video_tokens

    def validate(self) -> "TokenLayout":
        _, _, hv, wv = self.video_shape
        if hv % self.patch or wv % self.patch:
            raise TokenLayoutError(
                f"video latent spatial {hv}x{wv} not divisible by patch {self.patch}")
        return self


def _flatten_audio(z_a: torch.Tensor) -> torch.Tensor:
    return rearrange(z_a, "b c h w -> b (h w) c")


def _flatten_video(z_v: torch.Tensor, patch: int) -> torch.Tensor:
    return rearrange(z_v, "b f c (h p) (w q) -> b (f h w) (c p q)", p=patch, q=patch)


def rasterize_pair(
    z_a: torch.Tensor, z_v: torch.Tensor, patch: int = 2
) -> tuple[torch.Tensor, TokenLayout]:
    """Row-major rasterization of a latent pair into one (B, L, D) sequence.

    EOS rows are zero-filled placeholders (the model supplies its learned
    embeddings there); audio rows are zero-padded up to the common token dim.
    """
    layout = TokenLayout(tuple(z_a.shape[1:]), tuple(z_v.shape[1:]), patch).validate()
    b = z_a.shape[0]
    if z_v.shape[0] != b:
        raise TokenLayoutError("audio/video batch mismatch")
    tokens = z_a.new_zeros((b, layout.length, layout.token_dim))
    a0, a1 = layout.audio_span
    v0, v1 = layout.video_span
    tokens[:, a0:a1, : layout.audio_dim] = _flatten_audio(z_a)
    tokens[:, v0:v1, : layout.video_dim] = _flatten_video(z_v, patch)
    return tokens, layout


def derasterize_pair(
    tokens: torch.Tensor, layout: TokenLayout
) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact inverse of `rasterize_pair`; EOS positions are dropped."""
    if tokens.shape[1] != layout.length:
        raise TokenLayoutError(f"sequence length {tokens.shape[1]} != layout {layout.length}")
    a0, a1 = layout.audio_span
    v0, v1 = layout.video_span
    c, ha, wa = layout.audio_shape
    f, cv, hv, wv = layout.video_shape
    z_a = rearrange(tokens[:, a0:a1, :layout.audio_dim], "b (h w) c -> b c h w", h=ha, w=wa)
    z_v = rearrange(
        tokens[:, v0:v1, :layout.video_dim],
        "b (f h w) (c p q) -> b f c (h p) (w q)",
        f=f, h=hv // layout.patch, w=wv // layout.patch,
        c=cv, p=layout.patch, q=layout.patch,
    )
    return z_a, z_v


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class DiTBlock(nn.Module):
    """Transformer block with adaptive-layer-norm timestep conditioning."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = Attention(width, heads=heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.normal_(self.modulation[-1].weight, std=0.02)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(temb).chunk(6, dim=-1)
        x = x + (1.0 + g1[:, None, :]) * self.attn(_modulate(self.norm1(x), sh1, sc1))
        x = x + (1.0 + g2[:, None, :]) * self.mlp(_modulate(self.norm2(x), sh2, sc2))
        return x


class JointDiT(nn.Module):
    """Unified denoiser for the concatenated audio/video token sequence."""

    def __init__(self, audio_shape: tuple[int, int, int],
                 video_shape: tuple[int, int, int, int],
                 patch: int = 2, width: int = 384, depth: int = 8, heads: int = 6):
        super().__init__()
        self.layout = TokenLayout(tuple(audio_shape), tuple(video_shape), patch).validate()
        lay = self.layout
        self.width = width

        self.audio_in = nn.Linear(lay.audio_dim, width)
        self.video_in = nn.Linear(lay.video_dim, width)
        self.eos_audio = nn.Parameter(torch.zeros(width))
        self.eos_video = nn.Parameter(torch.zeros(width))
        self.pos_audio = nn.Parameter(torch.zeros(lay.audio_tokens, width))
        self.pos_video = nn.Parameter(torch.zeros(lay.video_tokens, width))
        for p in (self.eos_audio, self.eos_video, self.pos_audio, self.pos_video):
            nn.init.normal_(p, std=0.02)

        # zero-initialized, bias-free: condition injection starts as a no-op
        self.cond_audio_proj = nn.Linear(lay.audio_dim, width, bias=False)
        self.cond_video_proj = nn.Linear(lay.video_dim, width, bias=False)
        nn.init.zeros_(self.cond_audio_proj.weight)
        nn.init.zeros_(self.cond_video_proj.weight)

        self.time_embed = TimeEmbedding(width, width)
        self.blocks = nn.ModuleList([DiTBlock(width, heads) for _ in range(depth)])
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        nn.init.normal_(self.final_modulation[-1].weight, std=0.02)
        nn.init.zeros_(self.final_modulation[-1].bias)
        self.audio_out = nn.Linear(width, lay.audio_dim)
        self.video_out = nn.Linear(width, lay.video_dim)
        nn.init.normal_(self.audio_out.weight, std=0.02)
        nn.init.normal_(self.video_out.weight, std=0.02)
        nn.init.zeros_(self.audio_out.bias)
        nn.init.zeros_(self.video_out.bias)

    def attention_mask(self) -> torch.Tensor:
        """Every token may attend to every token."""
        return torch.ones(self.layout.length, self.layout.length, dtype=torch.bool)

    def embed_tokens(self, z_a_t: torch.Tensor, z_v_t: torch.Tensor) -> torch.Tensor:
        lay = self.layout
        b = z_a_t.shape[0]
        x = z_a_t.new_zeros((b, lay.length, self.width))
        a0, a1 = lay.audio_span
        v0, v1 = lay.video_span
        x[:, a0:a1] = self.audio_in(_flatten_audio(z_a_t)) + self.pos_audio.to(x.dtype)
        x[:, v0:v1] = self.video_in(_flatten_video(z_v_t, lay.patch)) + self.pos_video.to(x.dtype)
        x[:, lay.eos_audio] = self.eos_audio.to(x.dtype)
        x[:, lay.eos_video] = self.eos_video.to(x.dtype)
        return x

    def inject_condition(self, x: torch.Tensor, cond_a: torch.Tensor | None,
                         cond_v: torch.Tensor | None) -> torch.Tensor:
        """Add projected condition latents onto their modality's token span."""
        lay = self.layout
        if cond_a is not None:
            a0, a1 = lay.audio_span
            if tuple(cond_a.shape[1:]) != lay.audio_shape:
                raise TokenLayoutError(
                    f"audio condition shape {tuple(cond_a.shape[1:])} != {lay.audio_shape}")
            x = x.clone()
            x[:, a0:a1] = x[:, a0:a1] + self.cond_audio_proj(_flatten_audio(cond_a))
        if cond_v is not None:
            v0, v1 = lay.video_span
            if tuple(cond_v.shape[1:]) != lay.video_shape:
                raise TokenLayoutError(
                    f"video condition shape {tuple(cond_v.shape[1:])} != {lay.video_shape}")
            x = x.clone()
            x[:, v0:v1] = x[:, v0:v1] + self.cond_video_proj(_flatten_video(cond_v, lay.patch))
        return x

    def forward(self, z_a_t: torch.Tensor, z_v_t: torch.Tensor, t: torch.Tensor,
                cond_a: torch.Tensor | None = None,
                cond_v: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        lay = self.layout
        if tuple(z_a_t.shape[1:]) != lay.audio_shape:
            raise TokenLayoutError(
                f"audio latent shape {tuple(z_a_t.shape[1:])} != {lay.audio_shape}")
        if tuple(z_v_t.shape[1:]) != lay.video_shape:
            raise TokenLayoutError(
                f"video latent shape {tuple(z_v_t.shape[1:])} != {lay.video_shape}")
        if isinstance(t, int):
            t = torch.full((z_a_t.shape[0],), t, dtype=torch.long, device=z_a_t.device)
        x = self.embed_tokens(z_a_t, z_v_t)
        x = self.inject_condition(x, cond_a, cond_v)
        temb = self.time_embed(t)
        for block in self.blocks:
            x = block(x, temb)
        sh, sc = self.final_modulation(temb).chunk(2, dim=-1)
        x = _modulate(self.final_norm(x), sh, sc)

        a0, a1 = lay.audio_span
        v0, v1 = lay.video_span
        out = x.new_zeros((x.shape[0], lay.length, lay.token_dim))
        out[:, a0:a1, : lay.audio_dim] = self.audio_out(x[:, a0:a1])
        out[:, v0:v1, : lay.video_dim] = self.video_out(x[:, v0:v1])
        return derasterize_pair(out, lay)


def build_dit(audio_shape, video_shape, patch: int, depth: int, width: int, heads: int) -> JointDiT:
    return JointDiT(audio_shape, video_shape, patch=patch, width=width, depth=depth, heads=heads)
