import math

import mpmath
import numpy as np
import pytest
import torch

from lesionfill.diffusion import (
    DiffusionConfig,
    build_schedule,
    forward_sample,
    min_snr_weight,
    noise_prediction_loss,
    snr,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(DiffusionConfig())


class TestBuildSchedule:
    def test_default_endpoints(self, sched):
        assert sched.beta(1) == pytest.approx(1e-4)
        assert sched.beta(1000) == pytest.approx(0.02)
        assert sched.alpha_bar(1) == pytest.approx(0.9999)

    def test_single_step(self):
        s = build_schedule(DiffusionConfig(num_steps=1, beta_end=1e-4))
        assert s.alpha_bar(1) == s.alpha(1) == 1 - s.beta(1)

    def test_terminal_marginal_near_standard_normal(self, sched):
        assert sched.alpha_bar(1000) < 1e-3

    def test_alpha_bar_matches_extended_precision_product(self, sched):
        # oracle: sequential product at 50 decimal digits
        mpmath.mp.dps = 50
        prod = mpmath.mpf(1)
        for t in range(1, 1001):
            prod *= 1 - mpmath.mpf(sched.beta(t))
            rel = abs(sched.alpha_bar(t) - prod) / prod
            assert rel < 1e-12

    def test_alpha_bar_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_cosine_schedule_valid(self):
        s = build_schedule(DiffusionConfig(schedule_kind="cosine"))
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert s.alpha_bar(1000) < 1e-3

    @pytest.mark.parametrize(
        "cfg",
        [
            DiffusionConfig(num_steps=0),
            DiffusionConfig(beta_start=0.0),
            DiffusionConfig(beta_end=1.0),
            DiffusionConfig(beta_start=0.5, beta_end=0.1),
            DiffusionConfig(schedule_kind="exp"),
        ],
    )
    def test_invalid_config_rejected(self, cfg):
        with pytest.raises(ValueError):
            build_schedule(cfg)


class TestForwardSample:
    def test_zero_noise(self, sched):
        x0 = np.random.default_rng(0).normal(size=(4, 4))
        out = forward_sample(x0, 100, np.zeros_like(x0), sched)
        assert np.allclose(out, math.sqrt(sched.alpha_bar(100)) * x0)

    def test_zero_signal(self, sched):
        eps = np.random.default_rng(1).normal(size=(4, 4))
        out = forward_sample(np.zeros_like(eps), 100, eps, sched)
        assert np.allclose(out, math.sqrt(1 - sched.alpha_bar(100)) * eps)

    def test_marginal_matches_closed_form(self, sched):
        # Monte-Carlo check of the q(x_t | x_0) mean/variance, 1e5 draws
        rng = np.random.default_rng(2)
        x0, t, n = 0.7, 400, 100_000
        eps = rng.standard_normal(n)
        samples = forward_sample(np.full(n, x0), np.full(n, t), eps, sched)
        ab = sched.alpha_bar(t)
        se_mean = math.sqrt((1 - ab) / n)
        assert abs(samples.mean() - math.sqrt(ab) * x0) < 3 * se_mean
        se_var = (1 - ab) * math.sqrt(2.0 / (n - 1))
        assert abs(samples.var(ddof=1) - (1 - ab)) < 3 * se_var

    def test_two_step_composition_matches_closed_form(self, sched):
        # Eq. 1 applied twice vs the t=2 closed form, Monte Carlo
        rng = np.random.default_rng(3)
        x0, n = 0.5, 100_000
        x1 = math.sqrt(sched.alpha(1)) * x0 + math.sqrt(sched.beta(1)) * rng.standard_normal(n)
        x2 = np.sqrt(sched.alpha(2)) * x1 + math.sqrt(sched.beta(2)) * rng.standard_normal(n)
        ab2 = sched.alpha_bar(2)
        se_mean = math.sqrt((1 - ab2) / n)
        assert abs(x2.mean() - math.sqrt(ab2) * x0) < 3 * se_mean
        se_var = (1 - ab2) * math.sqrt(2.0 / (n - 1))
        assert abs(x2.var(ddof=1) - (1 - ab2)) < 3 * se_var

    def test_per_sample_timesteps_match_scalar(self, sched):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(3, 2, 2))
        eps = rng.normal(size=(3, 2, 2))
        batched = forward_sample(x0, np.array([10, 500, 999]), eps, sched)
        for i, t in enumerate([10, 500, 999]):
            assert np.allclose(batched[i], forward_sample(x0[i], t, eps[i], sched))

    def test_torch_tensors_accepted(self, sched):
        x0 = torch.randn(2, 1, 4, 4)
        eps = torch.randn(2, 1, 4, 4)
        out = forward_sample(x0, np.array([5, 700]), eps, sched)
        assert isinstance(out, torch.Tensor) and out.shape == x0.shape

    def test_shape_mismatch_rejected(self, sched):
        with pytest.raises(ValueError, match="shape"):
            forward_sample(np.zeros((2, 2)), 1, np.zeros((3, 3)), sched)

    def test_timestep_out_of_range(self, sched):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 1001, np.zeros(2), sched)


class TestSnr:
    def test_symmetry_point(self):
        # craft a schedule and query the abar=0.5 identity indirectly
        s = build_schedule(DiffusionConfig())
        t_half = int(np.argmin(np.abs(s.alpha_bars - 0.5))) + 1
        ab = s.alpha_bar(t_half)
        assert snr(s, t_half) == pytest.approx(ab / (1 - ab))

    def test_first_step_value(self, sched):
        assert snr(sched, 1) == pytest.approx(0.9999 / 0.0001, rel=1e-9)

    def test_strictly_decreasing(self, sched):
        values = [snr(sched, t) for t in range(1, 1001)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestMinSnrWeight:
    def test_clamp_active(self, sched):
        t = next(t for t in range(1, 1001) if snr(sched, t) > 5)
        assert min_snr_weight(sched, t, 5.0) == pytest.approx(5.0 / snr(sched, t))

    def test_clamp_inactive(self, sched):
        t = next(t for t in range(1, 1001) if snr(sched, t) < 5)
        assert min_snr_weight(sched, t, 5.0) == 1.0

    def test_weights_in_unit_interval_and_nondecreasing(self, sched):
        w = [min_snr_weight(sched, t, 5.0) for t in range(1, 1001)]
        assert all(0 < x <= 1 for x in w)
        assert all(a <= b for a, b in zip(w, w[1:]))

    def test_weight_times_snr_identity(self, sched):
        for t in (1, 250, 500, 1000):
            s = snr(sched, t)
            assert min_snr_weight(sched, t, 5.0) * s == pytest.approx(min(s, 5.0))

    def test_nonpositive_gamma_rejected(self, sched):
        with pytest.raises(ValueError):
            min_snr_weight(sched, 1, 0.0)


class TestNoisePredictionLoss:
    def test_identity_is_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
        assert noise_prediction_loss(x, x.copy()) == 0.0

    def test_constant_offset(self):
        a = np.zeros((2, 1, 4, 4))
        assert noise_prediction_loss(a, np.ones_like(a)) == pytest.approx(1.0)

    def test_weighted_hand_example(self):
        # per-sample MSEs {0.2, 0.4}, weights {1.0, 0.5} -> 0.2
        e1 = np.full((1, 4), math.sqrt(0.2))
        e2 = np.full((1, 4), math.sqrt(0.4))
        pred = np.concatenate([e1, e2])
        true = np.zeros_like(pred)
        loss = noise_prediction_loss(true, pred, weights=[1.0, 0.5])
        assert loss == pytest.approx(0.2)

    def test_torch_gradient_flows(self):
        pred = torch.randn(2, 3, requires_grad=True)
        loss = noise_prediction_loss(torch.zeros(2, 3), pred, weights=[1.0, 2.0])
        loss.backward()
        assert pred.grad is not None

    def test_shape_and_weight_length_checks(self):
        with pytest.raises(ValueError):
            noise_prediction_loss(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            noise_prediction_loss(np.zeros((2, 2)), np.zeros((2, 2)), weights=[1.0])
