"""Training objectives for the multi-modal autoencoder.

The adversarial pair uses the numerically stable real-logit convention: the
discriminator emits one logit per tuple, trained with softplus BCE against
one real tuple and four fake tuples (the decoded tuple, two mixed tuples and
the frame-order swap); the autoencoder minimizes the non-saturating generator
loss on the fully decoded tuple only.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


class LossError(ValueError):
    pass


def info_nce_pair_loss(u: torch.Tensor, v: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric dot-product contrastive loss over index-matched pairs.

    u, v: (B, d) 1-D features; matched pairs share a row index. The two
    softmax directions are averaged, each a batch-mean cross-entropy.
    Zero for B == 1.
    """
    if u.ndim != 2 or u.shape != v.shape:
        raise LossError(f"expected matching (B, d) features, got {u.shape} vs {v.shape}")
    if u.shape[0] == 0:
        raise LossError("empty batch")
    logits = temperature * (u @ v.T)
    targets = torch.arange(u.shape[0], device=u.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def classification_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise LossError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, labels)


def kl_to_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed per sample, batch-averaged.

    Inputs are (B, ...); all non-batch dimensions are summed.
    """
    if mean.shape != logvar.shape:
        raise LossError("mean/logvar shape mismatch")
    per_element = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_element.reshape(mean.shape[0], -1).sum(dim=1).mean()


def adversarial_losses(
    disc,
    real: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    fake: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    frame_pair: tuple[int, int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_D, L_AE) for the five-tuple cross-modal scheme.

    real = (a, v_i, v_j) and fake = (a~, v~_i, v~_j) with i < j. The
    discriminator loss sees the real tuple plus four fakes: the decoded
    tuple, the two real/decoded mixtures, and the decoded tuple with its
    frames swapped. Fakes are detached inside L_D so its gradient never
    reaches the autoencoder; L_AE backpropagates through the decoded tuple.
    """
    if frame_pair is not None and frame_pair[0] >= frame_pair[1]:
        raise LossError(f"frame pair must satisfy i < j, got {frame_pair}")
    a, vi, vj = real
    fa, fvi, fvj = fake
    fa_d, fvi_d, fvj_d = fa.detach(), fvi.detach(), fvj.detach()
    fake_tuples = [
        (fa_d, fvi_d, fvj_d),
        (fa_d, fvi_d, vj),
        (fa_d, vi, fvj_d),
        (fa_d, fvj_d, fvi_d),
    ]
    loss_d = F.softplus(-disc(a, vi, vj)).mean()
    for tup in fake_tuples:
        loss_d = loss_d + F.softplus(disc(*tup)).mean()
    loss_ae = F.softplus(-disc(fa, fvi, fvj)).mean()
    return loss_d, loss_ae


def total_autoencoder_loss(
    mse: torch.Tensor,
    cl: torch.Tensor,
    co: torch.Tensor,
    kl_audio: torch.Tensor,
    kl_video: torch.Tensor,
    gan_ae: torch.Tensor,
    lambda_cl: float,
    lambda_co: float,
    lambda_kl: float,
    lambda_gan: float,
) -> torch.Tensor:
    return (
        mse
        + lambda_cl * cl
        + lambda_co * co
        + lambda_kl * (kl_audio + kl_video)
        + lambda_gan * gan_ae
    )
