"""Pixel-stage codec: frames <-> spatially downsampled grids (factor f).

Two interchangeable implementations behind one interface:

* ``PatchCodec`` (default): non-overlapping f x f patches flattened through a
  fixed orthonormal basis. Exactly invertible and norm-preserving, which makes
  every downstream test bitwise-checkable. Produces 3*f*f channels.
* ``LearnedPixelCodec``: a small convolutional autoencoder trained on the
  synthetic dataset, producing the configured channel count (lossy).
"""

from __future__ import annotations

import numpy as np
import torch
from einops import rearrange
from torch import nn

from .config import PixelConfig


class PixelCodecError(ValueError):
    pass


def _orthonormal_basis(dim: int, seed: int) -> np.ndarray:
    """Seeded random orthogonal matrix, sign-fixed so QR output is unique."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))[None, :]


class PatchCodec(nn.Module):
    """Exact orthonormal patch transform; decode(encode(x)) == x."""

    def __init__(self, factor: int = 8, basis_seed: int = 0, image_channels: int = 3):
        super().__init__()
        if factor < 1:
            raise PixelCodecError("factor must be positive")
        self.factor = factor
        self.image_channels = image_channels
        self.channels = image_channels * factor * factor
        basis = _orthonormal_basis(self.channels, basis_seed)
        self.register_buffer("basis", torch.from_numpy(basis))  # (d, d), float64

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[-3] != self.image_channels:
            raise PixelCodecError(f"expected {self.image_channels} image channels, got {x.shape[-3]}")
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise PixelCodecError(
                f"spatial size {x.shape[-2:]} not divisible by factor {self.factor}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) -> (..., 3*f*f, H/f, W/f)."""
        self._check(x)
        lead = x.shape[:-3]
        x = x.reshape(-1, *x.shape[-3:])
        patches = rearrange(x, "b c (h p) (w q) -> b (c p q) h w", p=self.factor, q=self.factor)
        basis = self.basis.to(patches.dtype)
        grid = torch.einsum("oc,bchw->bohw", basis, patches)
        return grid.reshape(*lead, *grid.shape[-3:])

    def decode(self, grid: torch.Tensor) -> torch.Tensor:
        """(..., 3*f*f, h, w) -> (..., 3, h*f, w*f); exact inverse of encode."""
        if grid.shape[-3] != self.channels:
            raise PixelCodecError(f"expected {self.channels} grid channels, got {grid.shape[-3]}")
        lead = grid.shape[:-3]
        grid = grid.reshape(-1, *grid.shape[-3:])
        basis = self.basis.to(grid.dtype)
        patches = torch.einsum("co,bchw->bohw", basis, grid)
        x = rearrange(patches, "b (c p q) h w -> b c (h p) (w q)", p=self.factor, q=self.factor)
        return x.reshape(*lead, *x.shape[-3:])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode(x)


class LearnedPixelCodec(nn.Module):
    """Small convolutional autoencoder with stride-2 stages (f = 2**n)."""

    def __init__(self, factor: int = 8, channels: int = 4, base: int = 32, image_channels: int = 3):
        super().__init__()
        n_down = int(round(np.log2(factor)))
        if 2**n_down != factor:
            raise PixelCodecError("learned codec requires a power-of-two factor")
        self.factor = factor
        self.channels = channels
        self.image_channels = image_channels

        enc: list[nn.Module] = []
        ch = image_channels
        width = base
        for _ in range(n_down):
            enc += [nn.Conv2d(ch, width, 3, stride=2, padding=1), nn.SiLU()]
            ch, width = width, min(width * 2, base * 4)
        enc.append(nn.Conv2d(ch, channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(channels, ch, 1), nn.SiLU()]
        for _ in range(n_down):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, max(ch // 2, base), 3, padding=1),
                nn.SiLU(),
            ]
            ch = max(ch // 2, base)
        dec.append(nn.Conv2d(ch, image_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def _flat(self, x: torch.Tensor, fn) -> torch.Tensor:
        lead = x.shape[:-3]
        out = fn(x.reshape(-1, *x.shape[-3:]))
        return out.reshape(*lead, *out.shape[-3:])

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise PixelCodecError(
                f"spatial size {x.shape[-2:]} not divisible by factor {self.factor}")
        return self._flat(x, self.encoder)

    def decode(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.shape[-3] != self.channels:
            raise PixelCodecError(f"expected {self.channels} grid channels, got {grid.shape[-3]}")
        return self._flat(grid, self.decoder)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def train_pixel_codec(
    codec: LearnedPixelCodec,
    images: torch.Tensor,
    steps: int = 200,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Fit the learned codec by plain reconstruction MSE on (N, 3, H, W) images."""
    opt = torch.optim.AdamW(codec.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, images.shape[0], size=min(batch_size, images.shape[0]))
        batch = images[torch.from_numpy(idx)]
        recon = codec(batch)
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return losses


def build_codec(cfg: PixelConfig) -> nn.Module:
    if cfg.codec == "exact":
        return PatchCodec(factor=cfg.factor, basis_seed=cfg.basis_seed)
    if cfg.codec == "learned":
        return LearnedPixelCodec(factor=cfg.factor, channels=cfg.channels, base=cfg.learned_base)
    raise PixelCodecError(f"unknown pixel codec {cfg.codec!r}")
