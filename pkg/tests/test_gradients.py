"""Analytic gradients vs central finite differences, double precision."""

import torch

from conftest import assert_grads_close, finite_difference_grad
from soundingvideo.autoencoder import TupleDiscriminator
from soundingvideo.diffusion import epsilon_loss
from soundingvideo.losses import adversarial_losses, info_nce_pair_loss, kl_to_standard_normal


def _analytic(loss_fn, tensors):
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.clone() for t in tensors]
    for t in tensors:
        t.requires_grad_(False)
        t.grad = None
    return grads


def test_contrastive_gradients():
    gen = torch.Generator().manual_seed(0)
    u = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    v = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    fn = lambda: info_nce_pair_loss(u, v, 1.3)
    assert_grads_close(_analytic(fn, [u, v]), finite_difference_grad(fn, [u, v]))


def test_kl_gradients():
    gen = torch.Generator().manual_seed(1)
    mean = torch.randn(2, 3, 2, generator=gen, dtype=torch.float64)
    logvar = torch.randn(2, 3, 2, generator=gen, dtype=torch.float64) * 0.5
    fn = lambda: kl_to_standard_normal(mean, logvar)
    assert_grads_close(_analytic(fn, [mean, logvar]),
                       finite_difference_grad(fn, [mean, logvar]))


def test_epsilon_loss_gradients():
    gen = torch.Generator().manual_seed(2)
    pa = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    pv = torch.randn(2, 5, generator=gen, dtype=torch.float64)
    ta = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    tv = torch.randn(2, 5, generator=gen, dtype=torch.float64)
    fn = lambda: epsilon_loss((pa, pv), (ta, tv))
    assert_grads_close(_analytic(fn, [pa, pv]), finite_difference_grad(fn, [pa, pv]))


def _small_disc_setup(seed=3):
    torch.manual_seed(seed)
    disc = TupleDiscriminator(grid_channels=8, base=16, blocks=1).double()
    gen = torch.Generator().manual_seed(seed)
    mk = lambda: torch.randn(1, 8, 2, 2, generator=gen, dtype=torch.float64)
    real = (mk(), mk(), mk())
    fake = (mk(), mk(), mk())
    return disc, real, fake


def test_discriminator_loss_gradients_wrt_real_and_params():
    disc, real, fake = _small_disc_setup()
    head_w = disc.head.weight.data

    def fn():
        return adversarial_losses(disc, real, fake)[0]

    tensors = list(real) + [head_w]
    analytic = []
    for t in list(real):
        t.requires_grad_(True)
    disc.head.weight.requires_grad_(True)
    loss = fn()
    loss.backward()
    analytic = [t.grad.clone() for t in real] + [disc.head.weight.grad.clone()]
    for t in real:
        t.requires_grad_(False)
        t.grad = None
    disc.zero_grad()
    numeric = finite_difference_grad(fn, tensors)
    assert_grads_close(analytic, numeric)


def test_generator_loss_gradients_wrt_fakes_and_params():
    disc, real, fake = _small_disc_setup(seed=4)
    head_w = disc.head.weight.data

    def fn():
        return adversarial_losses(disc, real, fake)[1]

    tensors = list(fake) + [head_w]
    for t in fake:
        t.requires_grad_(True)
    disc.head.weight.requires_grad_(True)
    loss = fn()
    loss.backward()
    analytic = [t.grad.clone() for t in fake] + [disc.head.weight.grad.clone()]
    for t in fake:
        t.requires_grad_(False)
        t.grad = None
    disc.zero_grad()
    numeric = finite_difference_grad(fn, tensors)
    assert_grads_close(analytic, numeric)


def test_discriminator_loss_blocks_gradients_to_fakes():
    disc, real, fake = _small_disc_setup(seed=5)
    for t in fake:
        t.requires_grad_(True)
    l_d, _ = adversarial_losses(disc, real, fake)
    l_d.backward()
    for t in fake:
        assert t.grad is None
        t.requires_grad_(False)
