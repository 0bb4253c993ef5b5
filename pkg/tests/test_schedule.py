import math

import numpy as np
import pytest

from zigzaglab.errors import ConfigError, NumericError
from zigzaglab.schedule import LatentState, NoiseSchedule, build_schedule, denoise_step, initial_noise, inverse_step


def make_state(data, t):
    return LatentState(np.asarray(data, dtype=np.float64), timestep=t)


class TestBuildSchedule:
    def test_constant_test_kind(self):
        sched = build_schedule("constant_test", 10, value=0.5)
        assert sched.alphas[0] == 1.0
        assert np.all(sched.alphas[1:] == 0.5)
        assert sched.num_steps == 10

    def test_linear_beta_matches_cumprod_oracle(self):
        sched = build_schedule("linear_beta", 50)
        betas = np.linspace(1e-4, 0.02, 50)
        # independent oracle: explicit running product
        prod = 1.0
        expected = [1.0]
        for b in betas:
            prod *= 1.0 - b
            expected.append(prod)
        np.testing.assert_allclose(sched.alphas, expected, rtol=1e-12)

    def test_linear_beta_single_step(self):
        sched = build_schedule("linear_beta", 1)
        assert sched.alphas[1] == pytest.approx(1.0 - 1e-4, rel=1e-12)

    def test_monotonicity_enforced_for_decreasing_kinds(self):
        for kind in ("linear_beta", "cosine"):
            a = build_schedule(kind, 25).alphas
            assert np.all(np.diff(a) < 0.0), kind
            assert 0.0 < a[-1] < a[0] == 1.0

    def test_cosine_terminal_alpha_is_small(self):
        sched = build_schedule("cosine", 50)
        assert sched.alphas[-1] < 1e-4

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            build_schedule("linear_beta", 0)
        with pytest.raises(ConfigError):
            build_schedule("linear_beta", 10, beta_start=-1.0)
        with pytest.raises(ConfigError):
            build_schedule("constant_test", 10, value=1.5)
        with pytest.raises(ConfigError):
            build_schedule("nope", 10)
        with pytest.raises(ConfigError):
            build_schedule("cosine", 10, bogus=3)

    def test_serialization_round_trip(self):
        sched = build_schedule("cosine", 20)
        again = NoiseSchedule.from_dict(sched.to_dict())
        assert np.array_equal(again.alphas, sched.alphas)
        assert again.kind == sched.kind


class TestDenoiseStep:
    def test_zero_eps_pure_rescale(self):
        sched = build_schedule("linear_beta", 5)
        x = make_state(np.ones((1, 4, 2)), 3)
        out = denoise_step(x, np.zeros((1, 4, 2)), sched)
        factor = math.sqrt(sched.alphas[2] / sched.alphas[3])
        np.testing.assert_allclose(out.data, factor, rtol=1e-12)
        assert out.timestep == 2

    def test_constant_schedule_collapses(self):
        sched = build_schedule("constant_test", 4, value=0.3)
        x = make_state(np.random.default_rng(0).standard_normal((1, 6, 2)), 3)
        eps = np.random.default_rng(1).standard_normal((1, 6, 2))
        out = denoise_step(x, eps, sched)
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=1e-12)

    def test_scalar_case_against_frozen_oracle(self):
        # alpha_t = 0.25, alpha_{t-1} = 0.64, x = 1, eps = 1, evaluated by hand:
        # x0_pred = (1 - sqrt(0.75)) / 0.5, out = 0.8 * x0_pred + 0.6
        sched = NoiseSchedule(kind="constant_test", alphas=np.array([1.0, 0.64, 0.25]), params={})
        out = denoise_step(make_state([[[1.0]]], 2), np.ones((1, 1, 1)), sched)
        x0_pred = (1.0 - math.sqrt(1.0 - 0.25)) / math.sqrt(0.25)
        expected = math.sqrt(0.64) * x0_pred + math.sqrt(1.0 - 0.64) * 1.0
        assert out.data[0, 0, 0] == pytest.approx(expected, rel=1e-15)
        assert out.data[0, 0, 0] == pytest.approx(0.8143593539448982, rel=1e-12)

    def test_preconditions(self):
        sched = build_schedule("linear_beta", 5)
        with pytest.raises(ValueError):
            denoise_step(make_state(np.zeros((1, 2, 2)), 0), np.zeros((1, 2, 2)), sched)
        with pytest.raises(NumericError):
            denoise_step(make_state(np.zeros((1, 2, 2)), 2), np.full((1, 2, 2), np.nan), sched)
        with pytest.raises(ValueError):
            denoise_step(make_state(np.zeros((1, 2, 2)), 2), np.zeros((1, 3, 2)), sched)

    def test_linearity(self):
        sched = build_schedule("linear_beta", 8)
        rng = np.random.default_rng(7)
        x, y = rng.standard_normal((2, 1, 5, 3))
        e, f = rng.standard_normal((2, 1, 5, 3))
        a, b = 1.7, -0.4
        lhs = denoise_step(make_state(a * x + b * y, 4), a * e + b * f, sched).data
        rhs = a * denoise_step(make_state(x, 4), e, sched).data + b * denoise_step(make_state(y, 4), f, sched).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestInverseStep:
    def test_zero_eps_inverts_zero_eps_denoise(self):
        sched = build_schedule("linear_beta", 6)
        x = make_state(np.random.default_rng(2).standard_normal((1, 4, 2)), 5)
        down = denoise_step(x, np.zeros_like(x.data), sched)
        up = inverse_step(down, np.zeros_like(x.data), sched)
        np.testing.assert_allclose(up.data, x.data, rtol=1e-12)
        assert up.timestep == 5

    def test_constant_schedule_identity(self):
        sched = build_schedule("constant_test", 4, value=0.7)
        x = make_state(np.random.default_rng(3).standard_normal((1, 4, 2)), 2)
        eps = np.random.default_rng(4).standard_normal((1, 4, 2))
        out = inverse_step(x, eps, sched)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)
        assert out.timestep == 3

    def test_precondition_at_top_of_schedule(self):
        sched = build_schedule("linear_beta", 4)
        with pytest.raises(ValueError):
            inverse_step(make_state(np.zeros((1, 2, 2)), 4), np.zeros((1, 2, 2)), sched)


class TestRoundTrip:
    def test_random_round_trips_with_frozen_eps(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(300):
            a_prev, a_t = rng.uniform(0.005, 1.0, size=2)
            sched = NoiseSchedule(kind="constant_test", alphas=np.array([1.0, a_prev, a_t]), params={})
            x = make_state(rng.standard_normal((1, 5, 2)), 2)
            c = rng.standard_normal((1, 5, 2))
            back = inverse_step(denoise_step(x, c, sched), c, sched)
            assert back.timestep == 2
            rel = np.abs(back.data - x.data).max() / max(np.abs(x.data).max(), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-6

    def test_timestep_bookkeeping_exact(self):
        sched = build_schedule("linear_beta", 9)
        x = make_state(np.zeros((1, 3, 1)), 6)
        eps = np.zeros((1, 3, 1))
        assert inverse_step(denoise_step(x, eps, sched), eps, sched).timestep == 6


class TestLatentState:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            LatentState(np.zeros((4, 2)), timestep=1)

    def test_initial_noise_seeded(self):
        a = initial_noise(2, 8, 3, 10, [5, 1])
        b = initial_noise(2, 8, 3, 10, [5, 1])
        assert np.array_equal(a.data, b.data)
        assert a.timestep == 10
        assert a.seed_lineage == (("init", (5, 1)),)
        c = initial_noise(2, 8, 3, 10, [5, 2])
        assert not np.array_equal(a.data, c.data)
