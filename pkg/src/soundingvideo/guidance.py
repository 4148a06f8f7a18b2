"""Task conditioning and cross-modal classifier-free guidance.

Three tasks share one model: unconditional joint generation (svg),
audio-to-video (a2v) and video-to-audio (v2a). Conditions are clean latents
of the conditioning modality injected through the model's zero-initialized
projections; a null condition is the all-zero latent. During conditional
sampling the conditioning modality's input slot carries the forward-corrupted
clean latent at the current timestep, while the target modality follows the
DDIM trajectory under a guided noise prediction.

Two guidance formulations ship behind a switch:

* ``paper-literal``:  phi * eps_cond - (1 - phi) * eps_uncond
* ``standard``:       (1 + w) * eps_cond - w * eps_uncond  with  w = phi - 1

Both coincide exactly at phi = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_timesteps, q_sample

TASKS = ("svg", "a2v", "v2a")
FORMULATIONS = ("paper-literal", "standard")


class GuidanceError(ValueError):
    pass


@dataclass
class ConditionPair:
    """Per-task condition payload; None stands for the all-zero null latent."""

    task: str
    cond_audio: torch.Tensor | None = None
    cond_video: torch.Tensor | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise GuidanceError(f"unknown task {self.task!r}")
        if self.task == "svg" and (self.cond_audio is not None or self.cond_video is not None):
            raise GuidanceError("svg carries null conditions for both modalities")
        if self.task == "a2v" and (self.cond_audio is None or self.cond_video is not None):
            raise GuidanceError("a2v requires an audio condition and a null video condition")
        if self.task == "v2a" and (self.cond_video is None or self.cond_audio is not None):
            raise GuidanceError("v2a requires a video condition and a null audio condition")


@dataclass
class GuidanceConfig:
    scale: float = 1.0  # the conditioning intensity
    formulation: str = "paper-literal"

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise GuidanceError(f"unknown formulation {self.formulation!r}")


def draw_task(rng: np.random.Generator, cond_prob: float = 0.05) -> str:
    """One task draw: P(a2v) = P(v2a) = cond_prob, remainder svg."""
    u = rng.random()
    if u < cond_prob:
        return "a2v"
    if u < 2 * cond_prob:
        return "v2a"
    return "svg"


def sample_training_task(
    rng: np.random.Generator,
    z_audio: torch.Tensor,
    z_video: torch.Tensor,
    cond_prob: float = 0.05,
) -> ConditionPair:
    """Draw one training task; conditional tasks carry the conditioning
    modality's clean latent as payload, svg carries nulls."""
    task = draw_task(rng, cond_prob)
    if task == "a2v":
        return ConditionPair(task="a2v", cond_audio=z_audio)
    if task == "v2a":
        return ConditionPair(task="v2a", cond_video=z_video)
    return ConditionPair(task="svg")


def combine_guided(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
                   guidance: GuidanceConfig) -> torch.Tensor:
    phi = guidance.scale
    if guidance.formulation == "paper-literal":
        return phi * eps_cond - (1.0 - phi) * eps_uncond
    w = phi - 1.0
    return (1.0 + w) * eps_cond - w * eps_uncond


def guided_epsilon(
    eps_fn,
    cond: ConditionPair,
    guidance: GuidanceConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Guided joint noise prediction with exactly two model evaluations.

    eps_fn(cond_audio, cond_video) -> (eps_a, eps_v) evaluates the model on
    the shared corrupted inputs with the given condition payload (None means
    null). The target modality's prediction is the guided combination; the
    conditioning modality's slot keeps the conditional-branch prediction.
    """
    if cond.task == "svg":
        raise GuidanceError("guidance applies to conditional tasks only")
    eps_a_c, eps_v_c = eps_fn(cond.cond_audio, cond.cond_video)
    eps_a_u, eps_v_u = eps_fn(None, None)
    if cond.task == "a2v":
        return eps_a_c, combine_guided(eps_v_c, eps_v_u, guidance)
    return combine_guided(eps_a_c, eps_a_u, guidance), eps_v_c


def sample_latent_pair(
    model,
    sched: NoiseSchedule,
    cond: ConditionPair,
    batch: int,
    audio_shape: tuple[int, int, int],
    video_shape: tuple[int, int, int, int],
    steps: int = 50,
    guidance: GuidanceConfig | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """DDIM-sample a latent pair for any task (joint for svg, guided else).

    For conditional tasks the conditioning modality's state is re-corrupted
    from the clean condition at every visited timestep and returned as the
    clean condition itself at the end.
    """
    guidance = guidance or GuidanceConfig()

    def randn(shape):
        return torch.randn(shape, generator=generator, dtype=dtype)

    z_a = randn((batch, *audio_shape))
    z_v = randn((batch, *video_shape))
    ts = ddim_timesteps(sched.steps, steps)

    for i in range(len(ts) - 1, -1, -1):
        t_now, t_prev = ts[i], (ts[i - 1] if i > 0 else 0)
        ab_now, ab_prev = sched.alpha_bar(t_now), sched.alpha_bar(t_prev)
        if cond.task == "a2v":
            z_a = q_sample(cond.cond_audio, t_now, randn(cond.cond_audio.shape), sched)
        elif cond.task == "v2a":
            z_v = q_sample(cond.cond_video, t_now, randn(cond.cond_video.shape), sched)

        if cond.task == "svg":
            eps_a, eps_v = model(z_a, z_v, t_now)
        else:
            eps_a, eps_v = guided_epsilon(
                lambda ca, cv: model(z_a, z_v, t_now, cond_a=ca, cond_v=cv), cond, guidance)

        def ddim_update(x, eps):
            x0 = (x - np.sqrt(1.0 - ab_now) * eps) / np.sqrt(ab_now)
            return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps

        if cond.task != "a2v":
            z_a = ddim_update(z_a, eps_a)
        if cond.task != "v2a":
            z_v = ddim_update(z_v, eps_v)

    if cond.task == "a2v":
        z_a = cond.cond_audio.clone()
    if cond.task == "v2a":
        z_v = cond.cond_video.clone()
    return z_a, z_v
