import numpy as np
import pytest
import torch

from soundingvideo.diffusion import (
    ScheduleError,
    ddim_sample,
    ddim_timesteps,
    epsilon_loss,
    make_schedule,
    q_sample,
)


class TestSchedule:
    def test_recursion_consistency_exact(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        recon = sched.alphas * np.concatenate([[1.0], sched.alpha_bars[:-1]])
        assert np.abs(recon - sched.alpha_bars).max() < 1e-12

    def test_terminal_alpha_bar_small(self):
        # oracle: direct product, independently of cumprod
        sched = make_schedule(1000, 1e-4, 2e-2)
        direct = 1.0
        for b in np.linspace(1e-4, 2e-2, 1000):
            direct *= 1.0 - b
        assert abs(direct - sched.alpha_bars[-1]) < 1e-15
        assert sched.alpha_bars[-1] < 5e-5

    def test_single_step_schedule(self):
        sched = make_schedule(1, 0.3, 0.3)
        assert sched.alpha_bar(1) == pytest.approx(0.7)

    def test_monotone_decreasing_and_in_range(self):
        sched = make_schedule(200, 1e-4, 2e-2)
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert np.all((sched.alpha_bars > 0) & (sched.alpha_bars < 1))

    def test_snr_strictly_decreasing(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        assert np.all(np.diff(sched.snr()) < 0)

    @pytest.mark.parametrize("args", [
        (0, 1e-4, 2e-2), (10, 0.0, 2e-2), (10, 2e-2, 1e-4), (10, 1e-4, 1.0),
    ])
    def test_invalid_ranges_rejected(self, args):
        with pytest.raises(ScheduleError):
            make_schedule(*args)


class TestQSample:
    def test_deterministic_branch(self):
        # alpha_bar = 0.25 at t=1 for beta=0.75
        sched = make_schedule(1, 0.75, 0.75)
        z0 = torch.ones(2, 3, 4, 4, dtype=torch.float64)
        zt = q_sample(z0, 1, torch.zeros_like(z0), sched)
        assert torch.allclose(zt, torch.full_like(z0, 0.5), atol=1e-12)

    def test_marginal_variance_pure_noise(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        t = 600
        gen = torch.Generator().manual_seed(0)
        draws = torch.randn(10_000, dtype=torch.float64, generator=gen)
        zt = q_sample(torch.zeros(10_000, dtype=torch.float64), t, draws, sched)
        target = 1.0 - sched.alpha_bar(t)
        assert abs(float(zt.var(unbiased=True)) - target) / target < 0.05

    def test_monte_carlo_moments(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        t, mu, n = 400, 1.7, 10_000
        gen = torch.Generator().manual_seed(1)
        noise = torch.randn(n, dtype=torch.float64, generator=gen)
        zt = q_sample(torch.full((n,), mu, dtype=torch.float64), t, noise, sched)
        ab = sched.alpha_bar(t)
        want_mean, want_var = np.sqrt(ab) * mu, 1.0 - ab
        se_mean = np.sqrt(want_var / n)
        se_var = want_var * np.sqrt(2.0 / (n - 1))
        assert abs(float(zt.mean()) - want_mean) < 3 * se_mean
        assert abs(float(zt.var(unbiased=True)) - want_var) < 3 * se_var

    def test_out_of_range_timestep(self):
        sched = make_schedule(10, 1e-4, 2e-2)
        z = torch.zeros(3)
        with pytest.raises(ScheduleError):
            q_sample(z, 11, torch.zeros_like(z), sched)


class TestEpsilonLoss:
    def test_perfect_prediction_is_zero(self):
        n = (torch.randn(4, 8), torch.randn(4, 16))
        assert float(epsilon_loss(n, n)) == 0.0

    def test_constant_offset_arithmetic(self):
        na, nv = torch.randn(3, 5), torch.randn(3, 7)
        pred = (na + 2.0, nv + 2.0)
        assert float(epsilon_loss(pred, (na, nv))) == pytest.approx(4.0, abs=1e-6)

    def test_zero_prediction_expectation(self):
        gen = torch.Generator().manual_seed(2)
        na = torch.randn(10_000, generator=gen, dtype=torch.float64)
        nv = torch.randn(10_000, generator=gen, dtype=torch.float64)
        loss = float(epsilon_loss((torch.zeros_like(na), torch.zeros_like(nv)), (na, nv)))
        # E[loss] = 1; var of each mean-square is 2/n
        se = np.sqrt(0.5 * 2.0 / 10_000 + 0.5 * 2.0 / 10_000)
        assert abs(loss - 1.0) < 3 * se

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ScheduleError):
            epsilon_loss((torch.zeros(2), torch.zeros(3)), (torch.zeros(2), torch.zeros(4)))


class TestDDIM:
    def test_timestep_subset_even_and_final(self):
        ts = ddim_timesteps(1000, 50)
        assert len(ts) == 50 and ts[-1] == 1000
        assert ts == list(range(20, 1001, 20))

    def test_full_subset(self):
        assert ddim_timesteps(10, 10) == list(range(1, 11))

    def test_invalid_steps(self):
        with pytest.raises(ScheduleError):
            ddim_timesteps(100, 0)
        with pytest.raises(ScheduleError):
            ddim_timesteps(100, 101)

    def test_exact_noise_inversion_full_steps(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        gen = torch.Generator().manual_seed(3)
        z0 = torch.randn(2, 4, 6, generator=gen, dtype=torch.float64)
        noise = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
        zT = q_sample(z0, 1000, noise, sched)
        rec = ddim_sample(lambda x, t: noise, zT, sched, 1000)
        assert float((rec - z0).abs().max()) < 1e-4

    def test_inversion_on_tensor_pairs(self):
        sched = make_schedule(500, 1e-4, 2e-2)
        gen = torch.Generator().manual_seed(4)
        z = tuple(torch.randn(1, 3, 3, generator=gen, dtype=torch.float64) for _ in range(2))
        n = tuple(torch.randn(1, 3, 3, generator=gen, dtype=torch.float64) for _ in range(2))
        zT = tuple(q_sample(zi, 500, ni, sched) for zi, ni in zip(z, n))
        rec = ddim_sample(lambda xs, t: n, zT, sched, 500)
        for ri, zi in zip(rec, z):
            assert float((ri - zi).abs().max()) < 1e-4

    def test_trajectory_deterministic(self):
        sched = make_schedule(100, 1e-4, 2e-2)
        model = torch.nn.Linear(6, 6).double()

        def eps(x, t):
            with torch.no_grad():
                return model(x)

        init = torch.randn(2, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        a = ddim_sample(eps, init.clone(), sched, 10)
        b = ddim_sample(eps, init.clone(), sched, 10)
        assert torch.equal(a, b)
