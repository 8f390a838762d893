import math

import pytest
import torch

from regdit.diffusion import (
    T_MAX_CLAMP, UNCONDITIONAL, ConditionInfo, NoiseSchedule, euler_sample, noisify,
    sample_t, timestep_grid, v_target, x_to_v)
from regdit.exceptions import DimensionError, DomainError, SingularityError


def test_noisify_endpoints():
    z0, eps = torch.randn(4, 3), torch.randn(4, 3)
    assert torch.equal(noisify(z0, eps, 0.0).z_t, eps)
    assert torch.allclose(noisify(z0, eps, T_MAX_CLAMP).z_t, z0, atol=1e-2)


def test_noisify_rejects_bad_input():
    with pytest.raises(DimensionError):
        noisify(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)
    with pytest.raises(DomainError):
        noisify(torch.zeros(2), torch.zeros(2), 1.0)
    with pytest.raises(DomainError):
        noisify(torch.zeros(2), torch.zeros(2), -0.1)


@pytest.mark.parametrize("t", timestep_grid())
def test_velocity_is_data_minus_noise(t):
    g = torch.Generator().manual_seed(int(t * 1000))
    z0 = torch.randn(64, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(64, 16, generator=g, dtype=torch.float64)
    v = v_target(z0, noisify(z0, eps, t).z_t, t)
    assert (v - (z0 - eps)).abs().max() <= 1e-5


def test_timestep_grid_ends_at_clamp():
    grid = timestep_grid()
    assert grid[0] == 0.0 and grid[-1] == T_MAX_CLAMP and len(grid) == 11


def test_velocity_refuses_singular_time():
    z = torch.zeros(3)
    with pytest.raises(SingularityError):
        v_target(z, z, 1.0)
    with pytest.raises(SingularityError):
        x_to_v(z, z, torch.tensor([0.5, 1.0]))


def test_x_to_v_matches_target_for_perfect_prediction():
    z0, eps = torch.randn(2, 5, 4), torch.randn(2, 5, 4)
    t = torch.tensor([0.2, 0.7])
    z_t = t.view(-1, 1, 1) * z0 + (1 - t.view(-1, 1, 1)) * eps
    assert torch.allclose(x_to_v(z0, z_t, t), v_target(z0, z_t, t))


def test_schedule_coefficients():
    s = NoiseSchedule()
    assert s.alpha(0.3) == 0.3 and s.sigma(0.3) == pytest.approx(0.7)


@pytest.mark.parametrize("policy", ["uniform", "logit_normal"])
def test_sample_t_range_and_determinism(policy):
    a = sample_t(torch.Generator().manual_seed(5), policy, 1000)
    b = sample_t(torch.Generator().manual_seed(5), policy, 1000)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= T_MAX_CLAMP
    with pytest.raises(DomainError):
        sample_t(torch.Generator(), "cosine")


def test_condition_info_sentinel_row():
    assert ConditionInfo().unconditional
    assert ConditionInfo(UNCONDITIONAL).index(4) == 4
    assert ConditionInfo(2).index(4) == 2
    with pytest.raises(DomainError):
        ConditionInfo(7).index(4)


def test_euler_with_oracle_denoiser_reaches_target():
    target = torch.randn(3, 4, 2, dtype=torch.float64)
    oracle = lambda z, t, c: target
    noise = torch.randn(target.shape, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    z = euler_sample(oracle, torch.zeros(3), 40, g, target.shape, noise=noise)
    # a perfect x-prediction keeps Euler on the straight path, ending at t = clamp
    expected = T_MAX_CLAMP * target + (1 - T_MAX_CLAMP) * noise
    assert torch.allclose(z, expected, atol=1e-12)
    with pytest.raises(DomainError):
        euler_sample(oracle, torch.zeros(3), 0, g, target.shape)


def test_x_to_v_is_affine_in_prediction():
    g = torch.Generator().manual_seed(3)
    A, B, z = (torch.randn(5, 4, generator=g, dtype=torch.float64) for _ in range(3))
    a, b, t = 0.7, -1.3, 0.4
    lhs = x_to_v(a * A + b * B, z, t)
    rhs = a * x_to_v(A, z, t) + b * x_to_v(B, z, t) + (a + b - 1) * z / (1 - t)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_identity_prediction_keeps_the_noise():
    noise = torch.randn(2, 3, 4)
    z = euler_sample(lambda z, t, c: z, torch.zeros(2), 7, torch.Generator(), noise.shape,
                     noise=noise)
    assert torch.equal(z, noise)


def test_one_step_oracle_lands_on_datum():
    z0 = torch.randn(1, 4, 3, dtype=torch.float64)
    clamp = 1 - 1e-7
    z = euler_sample(lambda z, t, c: z0, torch.zeros(1), 1, torch.Generator().manual_seed(0),
                     z0.shape, t_max_clamp=clamp, dtype=torch.float64)
    assert (z - z0).abs().max() <= 1e-5


def test_euler_error_is_first_order_on_linear_field():
    a = -1.5
    # x-prediction whose velocity is a * z, so z(T) = exp(a T) z(0). On a
    # contracting field the Euler error ratio approaches 2 from above.
    model = lambda z, t, c: z + (1 - t).view(-1, 1, 1) * a * z
    noise = torch.ones(1, 2, 2, dtype=torch.float64)
    exact = math.exp(a * T_MAX_CLAMP)
    errors = []
    for steps in (8, 16, 32, 64):
        z = euler_sample(model, torch.zeros(1), steps, torch.Generator(), noise.shape, noise=noise)
        errors.append(float((z - exact).abs().max()))
    assert all(e2 <= e1 / 2 for e1, e2 in zip(errors, errors[1:]))


def test_uniform_draws_have_the_expected_mean():
    t = sample_t(torch.Generator().manual_seed(0), "uniform", 10_000, dtype=torch.float64)
    assert abs(float(t.mean()) - T_MAX_CLAMP / 2) <= 0.02
