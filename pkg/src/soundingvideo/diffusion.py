"""Shared diffusion machinery: noise schedule, forward corruption, epsilon
objective, and deterministic DDIM sampling.

One schedule serves both the signal decoder and the joint latent generator.
Timesteps are 1-based: t ranges over [1, T], with alpha_bar(0) defined as 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import ScheduleConfig


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    betas: np.ndarray       # (T,), beta_t in (0, 1)
    alphas: np.ndarray      # 1 - beta_t
    alpha_bars: np.ndarray  # cumulative products, strictly decreasing
    steps: int

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-based step t; alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise ScheduleError(f"t={t} outside [1, {self.steps}]")
        return float(self.alpha_bars[t - 1])

    def gather_alpha_bar(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Per-sample alpha_bar broadcast to the shape of `like`."""
        ab = torch.as_tensor(self.alpha_bars, dtype=like.dtype, device=like.device)
        out = ab[t.long() - 1]
        return out.view(-1, *([1] * (like.ndim - 1)))

    def snr(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars / (1.0 - self.alpha_bars))


def make_schedule(
    steps: int, beta_min: float = 1e-4, beta_max: float = 2e-2, kind: str = "linear"
) -> NoiseSchedule:
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"invalid beta range ({beta_min}, {beta_max})")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (np.all(alpha_bars > 0.0) and np.all(alpha_bars < 1.0)):
        raise ScheduleError("alpha_bar left (0, 1)")
    if steps > 1 and not np.all(np.diff(alpha_bars) < 0.0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, steps=steps)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max, cfg.kind)


def q_sample(
    z0: torch.Tensor, t: int | torch.Tensor, noise: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Corrupt z0 to step t: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise."""
    if noise.shape != z0.shape:
        raise ScheduleError("noise must match z0 shape")
    if isinstance(t, int):
        ab = z0.new_tensor(sched.alpha_bar(t))
    else:
        ab = sched.gather_alpha_bar(t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise


def epsilon_loss(
    predicted: tuple[torch.Tensor, torch.Tensor],
    target: tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    """Joint objective: half the per-element MSE of each modality's noise."""
    pa, pv = predicted
    ta, tv = target
    if pa.shape != ta.shape or pv.shape != tv.shape:
        raise ScheduleError("prediction/target shape mismatch")
    return 0.5 * torch.mean((pa - ta) ** 2) + 0.5 * torch.mean((pv - tv) ** 2)


def ddim_timesteps(total_steps: int, steps: int) -> list[int]:
    """`steps` evenly spaced 1-based timesteps, always including the final one."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    if steps > total_steps:
        raise ScheduleError(f"steps {steps} exceeds schedule length {total_steps}")
    ts = [int(round(total_steps * (i + 1) / steps)) for i in range(steps)]
    ts = sorted(set(max(1, t) for t in ts))
    assert ts[-1] == total_steps
    return ts


def ddim_sample(eps_fn, x_init, sched: NoiseSchedule, steps: int):
    """Deterministic (eta = 0) DDIM trajectory from x_init at t = T down to 0.

    eps_fn(state, t) -> state-like epsilon prediction, where state is a tuple
    of tensors (a single tensor is accepted and returned as such).
    """
    single = torch.is_tensor(x_init)
    xs = (x_init,) if single else tuple(x_init)
    ts = ddim_timesteps(sched.steps, steps)
    for i in range(len(ts) - 1, -1, -1):
        t_now = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        eps = eps_fn(xs[0] if single else xs, t_now)
        eps = (eps,) if single else tuple(eps)
        ab_now = sched.alpha_bar(t_now)
        ab_prev = sched.alpha_bar(t_prev)
        new_xs = []
        for x, e in zip(xs, eps):
            x0 = (x - np.sqrt(1.0 - ab_now) * e) / np.sqrt(ab_now)
            new_xs.append(np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * e)
        xs = tuple(new_xs)
    return xs[0] if single else xs
