import math

import numpy as np
import pytest
import torch

from soundingvideo.autoencoder import TupleDiscriminator
from soundingvideo.config import AutoencoderConfig
from soundingvideo.losses import (
    LossError,
    adversarial_losses,
    classification_loss_from_logits,
    info_nce_pair_loss,
    kl_to_standard_normal,
    total_autoencoder_loss,
)


class TestContrastive:
    def test_single_pair_is_zero(self):
        u = torch.randn(1, 8, dtype=torch.float64)
        v = torch.randn(1, 8, dtype=torch.float64)
        assert float(info_nce_pair_loss(u, v, 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_orthonormal_two_pair_closed_form(self):
        e = torch.eye(2, dtype=torch.float64)
        loss = float(info_nce_pair_loss(e, e, 1.0))
        want = -math.log(math.e / (math.e + 1.0))
        assert loss == pytest.approx(want, abs=1e-6)
        assert want == pytest.approx(0.3133, abs=5e-5)

    def test_batch_order_permutation_invariance(self):
        gen = torch.Generator().manual_seed(0)
        u = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        v = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        a = float(info_nce_pair_loss(u, v, 1.7))
        b = float(info_nce_pair_loss(u.flip(0), v.flip(0), 1.7))
        assert a == pytest.approx(b, abs=1e-12)

    def test_nonnegative_and_positive_for_nondegenerate(self):
        gen = torch.Generator().manual_seed(1)
        u = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        v = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        assert float(info_nce_pair_loss(u, v, 1.0)) > 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(LossError):
            info_nce_pair_loss(torch.zeros(0, 3), torch.zeros(0, 3), 1.0)


class TestClassification:
    def test_uniform_logits(self):
        logits = torch.zeros(3, 4)
        labels = torch.tensor([0, 1, 3])
        assert float(classification_loss_from_logits(logits, labels)) == pytest.approx(
            math.log(4.0), abs=1e-6)

    def test_margin_drives_loss_to_zero_monotonically(self):
        labels = torch.tensor([2])
        losses = []
        for margin in (1.0, 2.0, 4.0, 8.0, 16.0):
            logits = torch.zeros(1, 4)
            logits[0, 2] = margin
            losses.append(float(classification_loss_from_logits(logits, labels)))
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_out_of_range_label(self):
        with pytest.raises(LossError):
            classification_loss_from_logits(torch.zeros(1, 4), torch.tensor([4]))


class TestKL:
    def test_standard_normal_is_zero(self):
        mean = torch.zeros(2, 3)
        logvar = torch.zeros(2, 3)
        assert float(kl_to_standard_normal(mean, logvar)) == 0.0

    def test_unit_mean_single_element(self):
        kl = kl_to_standard_normal(torch.ones(1, 1), torch.zeros(1, 1))
        assert float(kl) == pytest.approx(0.5, abs=1e-7)

    def test_variance_four_single_element(self):
        logvar = torch.full((1, 1), math.log(4.0), dtype=torch.float64)
        kl = kl_to_standard_normal(torch.zeros(1, 1, dtype=torch.float64), logvar)
        want = 0.5 * (4.0 - 1.0 - math.log(4.0))
        assert float(kl) == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.8069, abs=5e-5)

    def test_sums_elements_averages_batch(self):
        mean = torch.ones(4, 2, 3)
        kl = kl_to_standard_normal(mean, torch.zeros_like(mean))
        assert float(kl) == pytest.approx(0.5 * 6, abs=1e-6)


class _StubDisc:
    """Returns a fixed logit for every tuple."""

    def __init__(self, logit):
        self.logit = logit

    def __call__(self, a, vi, vj):
        return torch.full((a.shape[0],), self.logit, dtype=a.dtype)


class TestAdversarial:
    def _tensors(self, seed=0, b=2):
        gen = torch.Generator().manual_seed(seed)
        mk = lambda: torch.randn(b, 4, 4, 4, generator=gen, dtype=torch.float64)
        return (mk(), mk(), mk()), (mk(), mk(), mk())

    def test_logit_zero_closed_form(self):
        real, fake = self._tensors()
        l_d, l_ae = adversarial_losses(_StubDisc(0.0), real, fake)
        assert float(l_d) == pytest.approx(5.0 * math.log(2.0), abs=1e-9)
        assert float(l_ae) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_perfect_discriminator_limit(self):
        real, fake = self._tensors()

        class Perfect:
            def __call__(self, a, vi, vj):
                is_real = torch.equal(a, real[0]) and torch.equal(vi, real[1]) \
                    and torch.equal(vj, real[2])
                return torch.full((a.shape[0],), 40.0 if is_real else -40.0,
                                  dtype=torch.float64)

        l_d, _ = adversarial_losses(Perfect(), real, fake)
        assert float(l_d) < 1e-12

    def test_frame_swap_tuple_matters(self):
        torch.manual_seed(0)
        disc = TupleDiscriminator(grid_channels=8, base=16, blocks=1).double()
        real, fake = self._tensors(seed=3)
        real = tuple(t[:, :, :4, :4].repeat(1, 2, 1, 1) for t in real)
        fake = tuple(t[:, :, :4, :4].repeat(1, 2, 1, 1) for t in fake)
        l_d, _ = adversarial_losses(disc, real, fake)

        # variant replacing the frame-order swap with the plain decoded tuple
        import torch.nn.functional as F
        fa, fvi, fvj = (t.detach() for t in fake)
        variant = F.softplus(-disc(*real)).mean()
        for tup in [(fa, fvi, fvj), (fa, fvi, real[2]), (fa, real[1], fvj), (fa, fvi, fvj)]:
            variant = variant + F.softplus(disc(*tup)).mean()
        assert abs(float(l_d) - float(variant)) > 1e-6

    def test_frame_pair_order_enforced(self):
        real, fake = self._tensors()
        with pytest.raises(LossError):
            adversarial_losses(_StubDisc(0.0), real, fake, frame_pair=(5, 2))
        with pytest.raises(LossError):
            adversarial_losses(_StubDisc(0.0), real, fake, frame_pair=(3, 3))


class TestTotalLoss:
    def test_zero_weights_reduce_to_mse(self):
        mse = torch.tensor(0.37)
        total = total_autoencoder_loss(mse, torch.tensor(9.0), torch.tensor(9.0),
                                       torch.tensor(9.0), torch.tensor(9.0),
                                       torch.tensor(9.0), 0.0, 0.0, 0.0, 0.0)
        assert float(total) == pytest.approx(0.37, abs=1e-7)

    def test_default_weights_arithmetic(self):
        one = torch.tensor(1.0, dtype=torch.float64)
        total = total_autoencoder_loss(one, one, one, one, one, one,
                                       0.1, 0.1, 1e-8, 0.1)
        assert float(total) == pytest.approx(1.3000000, abs=5e-8)

    def test_shipped_default_configuration(self):
        cfg = AutoencoderConfig()
        assert cfg.lambda_kl == 1e-8
        assert cfg.lambda_co == 0.1
        assert cfg.lambda_cl == 0.1
        assert cfg.lambda_gan == 0.1
