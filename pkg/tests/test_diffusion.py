"""
Tests for noise schedules, analog bits, forward diffusion and DDIM sampling
"""
import math

import pytest
import torch

from src.models.diffusion import (
    AnalogMask,
    DenoiserState,
    bit_decode,
    bit_encode,
    build_schedule,
    ddim_step,
    forward_diffuse,
    logits_to_analog,
    predict_noise,
    sample,
    sampling_timesteps,
    sinusoidal_embedding,
)
from src.utils.exceptions import ConfigurationError, ValidationError


class TestSchedules:
    """Test cases for cosine and linear schedules"""

    def test_cosine_endpoints(self):
        schedule = build_schedule("cosine", 1000)
        assert abs(schedule.alphabar[0].item() - 1.0) <= 1e-12
        assert schedule.alphabar[1000].item() < 1e-3
        assert schedule.alphabar[500].item() == pytest.approx(0.494, abs=1e-3)

    def test_linear_endpoints(self):
        schedule = build_schedule("linear", 1000)
        assert schedule.alphabar[0].item() == 1.0
        assert schedule.alphabar[1].item() == pytest.approx(1 - 1e-4)
        assert schedule.alphabar[1000].item() < 1e-3

    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    @pytest.mark.parametrize("t_train", [10, 100, 1000, 4000])
    def test_monotone(self, kind, t_train):
        alphabar = build_schedule(kind, t_train).alphabar
        assert torch.all(alphabar[1:] < alphabar[:-1])
        assert alphabar[-1].item() < 1e-3

    def test_unknown_schedule(self):
        with pytest.raises(ConfigurationError, match="Unknown noise schedule"):
            build_schedule("sigmoid", 1000)

    def test_at_out_of_range(self):
        with pytest.raises(ValidationError, match="out of range"):
            build_schedule("cosine", 10).at(11)

    def test_at_broadcasts_batch(self):
        schedule = build_schedule("cosine", 100)
        like = torch.zeros(3, 4, 4)
        value = schedule.at(torch.tensor([1, 50, 100]), like=like)
        assert tuple(value.shape) == (3, 1, 1)
        assert value.dtype == like.dtype


class TestAnalogBits:
    """Test cases for bit encoding"""

    @pytest.mark.parametrize("scale", [0.001, 0.01, 0.1, 1.0])
    def test_roundtrip(self, scale):
        generator = torch.Generator().manual_seed(0)
        masks = torch.randint(0, 2, (1000, 8, 8), generator=generator)
        decoded = bit_decode(bit_encode(masks, scale))
        assert decoded.dtype == torch.uint8
        assert torch.equal(decoded, masks.to(torch.uint8))

    def test_values(self):
        analog = bit_encode(torch.tensor([0.0, 1.0]), 0.01)
        torch.testing.assert_close(analog.values, torch.tensor([-0.01, 0.01]))

    def test_zero_decodes_to_background(self):
        assert bit_decode(torch.zeros(3)).sum() == 0

    def test_non_positive_scale(self):
        with pytest.raises(ConfigurationError, match="positive"):
            bit_encode(torch.ones(2), 0.0)


class TestForwardDiffusion:
    """Test cases for the forward process"""

    def test_noise_statistics(self):
        schedule = build_schedule("cosine", 1000)
        y0 = bit_encode(torch.ones(10_000, dtype=torch.float64), 0.5)
        eps = torch.randn(10_000, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        t = 300
        y_t = forward_diffuse(y0, t, eps, schedule).values
        alphabar = schedule.alphabar[t].item()
        assert y_t.mean().item() == pytest.approx(math.sqrt(alphabar) * 0.5, abs=0.03)
        assert y_t.var().item() == pytest.approx(1 - alphabar, rel=0.05)

    def test_t_zero_is_clean(self):
        schedule = build_schedule("cosine", 1000)
        y0 = bit_encode(torch.tensor([0.0, 1.0], dtype=torch.float64), 0.01)
        eps = torch.randn(2, dtype=torch.float64)
        torch.testing.assert_close(forward_diffuse(y0, 0, eps, schedule).values, y0.values)

    def test_shape_mismatch(self):
        schedule = build_schedule("cosine", 10)
        with pytest.raises(ValidationError, match="Noise shape"):
            forward_diffuse(bit_encode(torch.ones(2, 2), 0.1), 3, torch.zeros(3), schedule)

    def test_noise_recovery_identity(self):
        schedule = build_schedule("cosine", 1000)
        generator = torch.Generator().manual_seed(2)
        y0 = torch.randn(4, 8, generator=generator, dtype=torch.float64) * 0.01
        eps = torch.randn(4, 8, generator=generator, dtype=torch.float64)
        t = torch.tensor([1, 10, 500, 999])
        y_t = forward_diffuse(AnalogMask(y0, 0.01), t, eps, schedule).values
        recovered = predict_noise(y_t, y0, schedule.at(t, like=y_t))
        torch.testing.assert_close(recovered, eps, atol=1e-10, rtol=0)


class TestDDIM:
    """Test cases for the sampling ladder and DDIM steps"""

    def test_ladder(self):
        assert sampling_timesteps(1000, 20)[:3] == [1000, 950, 900]
        assert sampling_timesteps(1000, 20)[-1] == 50
        assert sampling_timesteps(10, 3) == [10, 7, 3]

    def test_ladder_too_many_steps(self):
        with pytest.raises(ValidationError, match="must not exceed"):
            sampling_timesteps(10, 11)

    def test_final_step_returns_clean_estimate(self):
        schedule = build_schedule("cosine", 100)
        state = DenoiserState(y_t=AnalogMask(torch.randn(2, 4, 4), 0.01), t=5)
        logits = torch.randn(2, 4, 4)
        final = ddim_step(state, logits, 0, schedule)
        torch.testing.assert_close(final.y_t.values, logits_to_analog(logits, 0.01))
        assert final.t == 0

    def test_step_must_decrease(self):
        schedule = build_schedule("cosine", 100)
        state = DenoiserState(y_t=AnalogMask(torch.zeros(1), 0.01), t=5)
        with pytest.raises(ValidationError, match="must be below"):
            ddim_step(state, torch.zeros(1), 5, schedule)

    def test_perfect_denoiser_recovers_mask(self):
        schedule = build_schedule("cosine", 1000)
        target = torch.randint(0, 2, (2, 8, 8), generator=torch.Generator().manual_seed(3))

        def oracle(y_t, t):
            return (target.to(y_t.dtype) * 2 - 1) * 20.0

        mask, prob = sample(oracle, (2, 8, 8), schedule, steps=20, scale=0.01, seed=0)
        assert torch.equal(mask, target.to(torch.uint8))
        assert prob.shape == (2, 8, 8)

    def test_sampler_deterministic(self):
        schedule = build_schedule("cosine", 1000)
        weights = torch.randn(8, 8, generator=torch.Generator().manual_seed(4))

        def denoise(y_t, t):
            return y_t * 50 + weights

        a = sample(denoise, (2, 8, 8), schedule, steps=20, scale=0.01, seed=7)
        b = sample(denoise, (2, 8, 8), schedule, steps=20, scale=0.01, seed=7)
        assert torch.equal(a[0], b[0])
        assert torch.equal(a[1], b[1])

    def test_sample_needs_seed_or_noise(self):
        schedule = build_schedule("cosine", 10)
        with pytest.raises(ValidationError, match="seed or explicit noise"):
            sample(lambda y, t: y, (1, 2, 2), schedule, steps=2, scale=0.01)


class TestTimestepEmbedding:
    def test_shape_and_range(self):
        embedding = sinusoidal_embedding(torch.tensor([0, 10, 999]), dim=16)
        assert tuple(embedding.shape) == (3, 16)
        assert embedding.abs().max() <= 1.0
        torch.testing.assert_close(embedding[0, :8], torch.ones(8, dtype=torch.float64))
