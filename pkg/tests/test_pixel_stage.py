import pytest
import torch

from soundingvideo.config import PixelConfig
from soundingvideo.pixel import (
    LearnedPixelCodec,
    PatchCodec,
    PixelCodecError,
    build_codec,
    train_pixel_codec,
)


class TestPatchCodec:
    def test_grid_geometry_at_default_factor(self):
        codec = PatchCodec(factor=8)
        frame = torch.randn(1, 3, 256, 256)
        grid = codec.encode(frame)
        assert grid.shape == (1, 192, 32, 32)

    def test_zero_frame_encodes_to_zero_grid(self):
        codec = PatchCodec(factor=8)
        grid = codec.encode(torch.zeros(2, 3, 64, 64))
        assert torch.all(grid == 0)

    def test_exact_round_trip_double(self):
        codec = PatchCodec(factor=8).double()
        x = torch.randn(2, 3, 64, 64, dtype=torch.float64)
        err = (codec.decode(codec.encode(x)) - x).abs().max()
        assert float(err) < 1e-6

    def test_decode_linearity(self):
        codec = PatchCodec(factor=8).double()
        g = torch.randn(1, 192, 8, 8, dtype=torch.float64)
        err = (codec.decode(2.0 * g) - 2.0 * codec.decode(g)).abs().max()
        assert float(err) == 0.0

    def test_norm_preservation(self):
        codec = PatchCodec(factor=8).double()
        x = torch.randn(3, 3, 64, 64, dtype=torch.float64)
        g = codec.encode(x)
        assert abs(float(x.norm()) - float(g.norm())) < 1e-9

    def test_indivisible_dimensions_rejected(self):
        codec = PatchCodec(factor=8)
        with pytest.raises(PixelCodecError):
            codec.encode(torch.zeros(1, 3, 60, 64))

    def test_wrong_grid_channels_rejected(self):
        codec = PatchCodec(factor=8)
        with pytest.raises(PixelCodecError):
            codec.decode(torch.zeros(1, 16, 8, 8))

    def test_frame_stack_leading_dims(self):
        codec = PatchCodec(factor=8)
        clip = torch.randn(2, 16, 3, 64, 64)
        grid = codec.encode(clip)
        assert grid.shape == (2, 16, 192, 8, 8)
        back = codec.decode(grid)
        assert back.shape == clip.shape

    def test_basis_is_seed_deterministic(self):
        a = PatchCodec(factor=4, basis_seed=3)
        b = PatchCodec(factor=4, basis_seed=3)
        c = PatchCodec(factor=4, basis_seed=4)
        assert torch.equal(a.basis, b.basis)
        assert not torch.equal(a.basis, c.basis)


class TestLearnedCodec:
    def test_shapes(self):
        codec = LearnedPixelCodec(factor=8, channels=4, base=16)
        x = torch.randn(2, 3, 64, 64)
        grid = codec.encode(x)
        assert grid.shape == (2, 4, 8, 8)
        assert codec.decode(grid).shape == x.shape

    def test_training_reduces_reconstruction_error(self):
        torch.manual_seed(0)
        codec = LearnedPixelCodec(factor=4, channels=4, base=16)
        images = torch.rand(8, 3, 32, 32) * 2 - 1
        losses = train_pixel_codec(codec, images, steps=60, lr=2e-3, seed=0)
        assert losses[-1] < 0.5 * losses[0]

    def test_non_power_of_two_factor_rejected(self):
        with pytest.raises(PixelCodecError):
            LearnedPixelCodec(factor=6)


def test_build_codec_dispatch():
    assert isinstance(build_codec(PixelConfig(codec="exact")), PatchCodec)
    assert isinstance(build_codec(PixelConfig(codec="learned")), LearnedPixelCodec)
    with pytest.raises(PixelCodecError):
        build_codec(PixelConfig(codec="nope"))
