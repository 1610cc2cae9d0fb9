import math

import numpy as np
import pytest
import torch

from textsr.services.diffusion import (
    build_schedule,
    ddim_step,
    ddpm_step,
    diffusion_loss,
    forward_marginal,
    forward_step,
    respace,
    sample_loop,
    stride_timesteps,
)


def oracle_net(z0, sched):
    """
    Noise predictor that knows the planted clean latent
    """

    def net(z_t, x_lr, c_rg, t):
        alpha_bar = sched.alpha_bar(int(t[0]))

        return (z_t - math.sqrt(alpha_bar) * z0) / math.sqrt(1.0 - alpha_bar)

    return net


class CountingNet:
    def __init__(self):
        self.calls = 0

    def __call__(self, z_t, x_lr, c_rg, t):
        self.calls += 1

        return torch.zeros_like(z_t)


class TestBuildSchedule:
    def test_linear_final_alpha_bar_matches_product(self):
        sched = build_schedule("linear", 1000, 1e-4, 0.02)
        expected = math.prod(1.0 - beta for beta in np.linspace(1e-4, 0.02, 1000))

        assert len(sched.betas) == 1000
        assert abs(sched.alpha_bar(1000) - expected) < 1e-12
        assert 3.5e-5 < sched.alpha_bar(1000) < 4.5e-5
        assert sched.alpha_bar(1000) < 1e-3

    def test_zero_noise_degenerate(self):
        sched = build_schedule("linear", 1, 0.0, 0.0)

        assert sched.betas.tolist() == [0.0]
        assert sched.alpha_bars.tolist() == [1.0]
        assert sched.beta_tildes.tolist() == [0.0]

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_alpha_bar_decreases(self, kind):
        sched = build_schedule(kind, 200)
        alpha_bars = sched.alpha_bars.numpy()

        assert np.all(np.diff(alpha_bars) < 0)
        assert sched.beta_tildes[0] == 0.0
        assert sched.alpha_bar(0) == 1.0

    def test_cosine_betas_are_clipped(self):
        sched = build_schedule("cosine", 1000)

        assert float(sched.betas.max()) <= 0.999
        assert float(sched.betas.min()) >= 0.0

    def test_deterministic(self):
        first = build_schedule("cosine", 50)
        second = build_schedule("cosine", 50)

        assert torch.equal(first.alpha_bars, second.alpha_bars)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"T": 0},
            {"beta_start": 0.01, "beta_end": 1.0},
            {"beta_start": 0.02, "beta_end": 0.01},
            {"kind": "quadratic"},
        ],
    )
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ValueError):
            build_schedule(**kwargs)

    def test_rows_follow_csv_columns(self):
        rows = build_schedule("linear", 10).rows()

        assert len(rows) == 10
        assert rows[0][0] == 1
        assert rows[-1][0] == 10
        assert rows[0][2] == pytest.approx(1.0 - rows[0][1])


class TestForwardProcess:
    def test_iterated_steps_match_marginal(self):
        sched = build_schedule("linear", 10, 0.1, 0.1)
        generator = torch.Generator().manual_seed(1)
        trials = 100_000

        z0 = torch.ones(trials, 1, 2, 2, dtype=torch.float64)
        z = z0.clone()

        for t in range(1, 11):
            z = forward_step(z, t, sched, torch.randn(z.shape, generator=generator, dtype=torch.float64))

        alpha_bar = 0.9 ** 10
        variance = 1.0 - alpha_bar
        count = z.numel()

        mean_error = abs(float(z.mean()) - math.sqrt(alpha_bar))
        var_error = abs(float(z.var()) - variance)

        assert sched.alpha_bar(10) == pytest.approx(alpha_bar, abs=1e-12)
        assert mean_error < 3 * math.sqrt(variance / count)
        assert var_error < 3 * variance * math.sqrt(2.0 / (count - 1))

    def test_marginal_monte_carlo_mean(self):
        sched = build_schedule("linear", 10, 0.1, 0.1)
        generator = torch.Generator().manual_seed(2)
        trials = 100_000

        z0 = torch.ones(trials, 1, 2, 2, dtype=torch.float64)
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
        z = forward_marginal(z0, 10, eps, sched)

        standard_error = math.sqrt((1.0 - 0.9 ** 10) / z.numel())

        assert abs(float(z.mean()) - 0.5905) < 3 * standard_error + 1e-4

    def test_full_schedule_marginal_resembles_standard_gaussian(self):
        sched = build_schedule("linear", 1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(3)
        trials = 1_000_000

        z0 = torch.full((1, 1, 2, 2), 3.0, dtype=torch.float64)
        eps = torch.randn((trials, 1, 2, 2), generator=generator, dtype=torch.float64)
        z = forward_marginal(z0.expand(trials, -1, -1, -1), 1000, eps, sched)

        mean = z.mean(dim=0)
        variance = z.var(dim=0)

        assert float(mean.norm()) <= 0.01 * float(z0.norm())
        assert float(variance.min()) >= 0.99
        assert float(variance.max()) <= 1.01

    def test_full_chain_reaches_unit_variance(self):
        sched = build_schedule("linear", 1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(4)

        z = torch.full((50_000,), 3.0, dtype=torch.float64)

        for t in range(1, 1001):
            z = forward_step(z, t, sched, torch.randn(z.shape, generator=generator, dtype=torch.float64))

        assert abs(float(z.var()) - 1.0) < 0.03
        assert abs(float(z.mean())) < 0.05

    def test_per_sample_timesteps(self):
        sched = build_schedule("linear", 100)
        z0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
        eps = torch.randn(3, 2, 4, 4, dtype=torch.float64)
        t = torch.tensor([1, 50, 100])

        batched = forward_marginal(z0, t, eps, sched)

        for index, step in enumerate(t.tolist()):
            single = forward_marginal(z0[index:index + 1], step, eps[index:index + 1], sched)
            torch.testing.assert_close(batched[index:index + 1], single)

    def test_zero_beta_step_is_identity(self):
        sched = build_schedule("linear", 1, 0.0, 0.0)
        z = torch.randn(2, 3, 4, 4)

        assert torch.equal(forward_step(z, 1, sched, torch.randn(2, 3, 4, 4)), z)

    @pytest.mark.parametrize("t", [0, 11])
    def test_timestep_out_of_range(self, t):
        sched = build_schedule("linear", 10)
        z = torch.zeros(1, 1, 2, 2)

        with pytest.raises(ValueError):
            forward_marginal(z, t, z, sched)

    def test_shape_mismatch(self):
        sched = build_schedule("linear", 10)

        with pytest.raises(ValueError, match="shape mismatch"):
            forward_marginal(torch.zeros(1, 1, 2, 2), 3, torch.zeros(1, 1, 2, 3), sched)


class TestDiffusionLoss:
    def test_zero_at_equality(self):
        eps = torch.randn(2, 3, 4, 4)

        assert float(diffusion_loss(eps, eps)) == 0.0

    def test_ones_against_zeros(self):
        assert float(diffusion_loss(torch.zeros(2, 3), torch.ones(2, 3))) == 1.0

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(3)
        first = rng.normal(size=(2, 3))
        second = rng.normal(size=(2, 3))

        expected = sum((a - b) ** 2 for a, b in zip(first.ravel(), second.ravel())) / 6
        value = float(diffusion_loss(torch.from_numpy(first), torch.from_numpy(second)))

        assert abs(value - expected) < 1e-12
        assert value == float(diffusion_loss(torch.from_numpy(second), torch.from_numpy(first)))


class TestReverseSteps:
    def test_ddpm_without_noise_prediction(self):
        sched = build_schedule("linear", 100)
        z = torch.randn(1, 3, 4, 4, dtype=torch.float64)

        result = ddpm_step(z, torch.zeros_like(z), 40, sched, noise=torch.zeros_like(z))

        torch.testing.assert_close(result, z / math.sqrt(float(sched.alphas[39])))

    def test_ddpm_zero_schedule_is_identity(self):
        sched = build_schedule("linear", 3, 0.0, 0.0)
        z = torch.randn(1, 3, 4, 4)

        for t in (3, 2, 1):
            assert torch.equal(ddpm_step(z, torch.randn_like(z), t, sched, noise=torch.randn_like(z)), z)

    @pytest.mark.parametrize("variance", ["beta_tilde", "beta"])
    def test_ddpm_recovers_planted_latent(self, variance):
        sched = build_schedule("linear", 10, 1e-4, 0.2)
        z0 = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        z = forward_marginal(z0, 10, torch.randn_like(z0), sched)
        net = oracle_net(z0, sched)

        for t in range(10, 0, -1):
            eps = net(z, None, None, torch.tensor([t]))

            # The noise-free posterior mean stays on the line through z0
            expected_x0 = (z - math.sqrt(1.0 - sched.alpha_bar(t)) * eps) / math.sqrt(sched.alpha_bar(t))
            torch.testing.assert_close(expected_x0, z0)

            z = ddpm_step(z, eps, t, sched, noise=torch.zeros_like(z), variance=variance)

        assert float((z - z0).abs().max()) < 1e-4

    def test_ddpm_last_step_adds_no_noise(self):
        sched = build_schedule("linear", 10)
        z = torch.randn(1, 3, 4, 4)
        eps = torch.randn_like(z)

        assert torch.equal(ddpm_step(z, eps, 1, sched, noise=torch.randn_like(z)), ddpm_step(z, eps, 1, sched))

    def test_ddpm_unknown_variance(self):
        sched = build_schedule("linear", 10)
        z = torch.randn(1, 3, 4, 4)

        with pytest.raises(ValueError, match="variance"):
            ddpm_step(z, z, 5, sched, noise=z, variance="learned")

    def test_ddim_is_pure_without_eta(self):
        sched = build_schedule("linear", 1000)
        z = torch.randn(1, 3, 4, 4)
        eps = torch.randn_like(z)

        assert torch.equal(ddim_step(z, eps, 500, 400, sched), ddim_step(z, eps, 500, 400, sched))

    def test_ddim_single_step_recovers_z0(self):
        sched = build_schedule("linear", 1000)
        z0 = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(z0)
        z_t = forward_marginal(z0, 500, eps, sched)

        assert float((ddim_step(z_t, eps, 500, 0, sched) - z0).abs().max()) < 1e-6

    def test_ddim_rejects_bad_arguments(self):
        sched = build_schedule("linear", 100)
        z = torch.randn(1, 3, 4, 4)

        with pytest.raises(ValueError, match="t_prev"):
            ddim_step(z, z, 10, 10, sched)

        with pytest.raises(ValueError, match="eta"):
            ddim_step(z, z, 10, 5, sched, eta=1.5)

        with pytest.raises(ValueError, match="noise"):
            ddim_step(z, z, 10, 5, sched, eta=0.5)


class TestSampleLoop:
    def test_stride_timesteps(self):
        timesteps = stride_timesteps(1000, 200)

        assert len(timesteps) == 200
        assert timesteps[0] == 1000
        assert all(later < earlier for earlier, later in zip(timesteps, timesteps[1:]))
        assert timesteps[-1] >= 1

        with pytest.raises(ValueError):
            stride_timesteps(10, 11)

    @pytest.mark.parametrize("sampler, T, steps", [("ddim", 1000, 200), ("ddpm", 100, 10), ("ddpm", 20, 20)])
    def test_network_evaluation_count(self, sampler, T, steps):
        net = CountingNet()
        x_lr = torch.zeros(1, 3, 2, 4)

        sample_loop(net, x_lr, None, build_schedule("linear", T), sampler=sampler, steps=steps)

        assert net.calls == steps

    def test_zero_schedule_returns_initial_draw(self):
        sched = build_schedule("linear", 10, 0.0, 0.0)
        x_lr = torch.zeros(2, 3, 4, 8)

        result = sample_loop(CountingNet(), x_lr, None, sched, steps=5, seed=7)
        initial = torch.randn((3, 4, 8), generator=torch.Generator().manual_seed(7))

        assert torch.equal(result[0], initial)
        assert torch.equal(result[1], initial)

    @pytest.mark.parametrize("sampler, eta", [("ddim", 0.0), ("ddim", 0.5), ("ddpm", 0.0)])
    def test_same_seed_same_output(self, sampler, eta):
        sched = build_schedule("linear", 50)
        x_lr = torch.randn(1, 3, 4, 8, generator=torch.Generator().manual_seed(0))

        def net(z_t, x, c_rg, t):
            return 0.1 * z_t + 0.05 * x

        first = sample_loop(net, x_lr, None, sched, sampler=sampler, steps=10, eta=eta, seed=11)
        second = sample_loop(net, x_lr, None, sched, sampler=sampler, steps=10, eta=eta, seed=11)
        other = sample_loop(net, x_lr, None, sched, sampler=sampler, steps=10, eta=eta, seed=12)

        assert torch.equal(first, second)
        assert not torch.equal(first, other)

    @pytest.mark.parametrize("sampler, eta", [("ddim", 0.5), ("ddpm", 0.0)])
    def test_rows_do_not_depend_on_the_batch(self, sampler, eta):
        sched = build_schedule("linear", 50)
        x_lr = torch.randn(3, 3, 4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

        def net(z_t, x, c_rg, t):
            return 0.1 * z_t + 0.05 * x

        batched = sample_loop(net, x_lr, None, sched, sampler=sampler, steps=10, eta=eta, seed=4)

        for row in range(3):
            alone = sample_loop(net, x_lr[row:row + 1], None, sched, sampler=sampler, steps=10, eta=eta, seed=4)

            assert torch.equal(batched[row], alone[0])

    def test_per_row_seeds(self):
        sched = build_schedule("linear", 10, 0.0, 0.0)
        x_lr = torch.zeros(2, 3, 4, 8)

        result = sample_loop(CountingNet(), x_lr, None, sched, steps=5, seed=[7, 8])

        assert torch.equal(result[1], torch.randn((3, 4, 8), generator=torch.Generator().manual_seed(8)))

        with pytest.raises(ValueError, match="seeds"):
            sample_loop(CountingNet(), x_lr, None, sched, steps=5, seed=[7])

    def test_ddim_planted_signal(self):
        sched = build_schedule("linear", 1000)
        z0 = torch.randn(1, 3, 4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        x_lr = torch.zeros(1, 3, 4, 8, dtype=torch.float64)

        result = sample_loop(oracle_net(z0, sched), x_lr, None, sched, sampler="ddim", steps=10, seed=3)

        assert float((result - z0).abs().max()) < 1e-4

    def test_unknown_sampler(self):
        with pytest.raises(ValueError, match="sampler"):
            sample_loop(CountingNet(), torch.zeros(1, 3, 2, 2), None, build_schedule("linear", 10), sampler="euler")

    def test_respaced_schedule_keeps_alpha_bars(self):
        sched = build_schedule("linear", 100)
        timesteps = stride_timesteps(100, 10)
        walk = respace(sched, timesteps)

        for position, t in enumerate(sorted(timesteps), start=1):
            assert walk.alpha_bar(position) == pytest.approx(sched.alpha_bar(t), rel=1e-12)
