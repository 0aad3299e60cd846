"""Reference path, noise schedules, time grids and the flow-matching loop."""
import math

import pytest
import torch
from pydantic import ValidationError

from src.generative.flow import (ZERO_SCHEDULE, augment_time_grid, coarse_nodes, drift, eta, fm_pretrain,
                                 interpolate, sample_base, sample_ode, sample_sde, sde_step, sigma)
from src.models.schemas import NoiseKind, NoiseSchedule, TimeGrid
from src.networks.architectures import AnalyticGaussianFlow, VectorFieldModel
from src.utils.errors import ConfigurationError, NumericalError
from src.utils.rng import make_rng

MEMORYLESS = NoiseSchedule(kind=NoiseKind.MEMORYLESS, h=1.0 / 64)


def test_eta_values():
    assert eta(0.5) == pytest.approx(1.0)
    assert eta(1.0) == 0.0
    with pytest.raises(NumericalError):
        eta(0.0)


def test_interpolate_endpoints_and_per_sample_times():
    x0 = torch.zeros(2, 3, dtype=torch.float64)
    x1 = torch.ones(2, 3, dtype=torch.float64)
    out = interpolate(x0, x1, torch.tensor([0.25, 1.0], dtype=torch.float64))
    assert torch.allclose(out[0], torch.full((3,), 0.25, dtype=torch.float64))
    assert torch.equal(out[1], x1[1])


def test_memoryless_sigma_matches_twice_eta_without_floor():
    tiny = NoiseSchedule(kind=NoiseKind.MEMORYLESS, h=1e-12)
    for t in (0.1, 0.5, 0.9):
        assert sigma(t, tiny) ** 2 == pytest.approx(2 * eta(t), rel=1e-9)
    assert sigma(0.3, ZERO_SCHEDULE) == 0.0


def test_memoryless_schedule_requires_floor():
    with pytest.raises(ValidationError):
        NoiseSchedule(kind=NoiseKind.MEMORYLESS, h=0.0)


def test_memoryless_drift_closed_form():
    v = torch.randn(4, 5, dtype=torch.float64)
    x = torch.randn(4, 5, dtype=torch.float64)
    t, h = 0.3, MEMORYLESS.h
    assert torch.allclose(drift(v, x, t, MEMORYLESS), 2 * v - x / (t + h))
    assert torch.equal(drift(v, x, t, ZERO_SCHEDULE), v)


def test_augment_time_grid_tail_refinement():
    nodes = augment_time_grid(TimeGrid(time_steps=5, k_sub=3))
    assert nodes == pytest.approx([0.0, 0.25, 0.5, 0.625, 0.75, 5 / 6, 11 / 12, 1.0])
    assert all(b > a for a, b in zip(nodes, nodes[1:]))


@pytest.mark.parametrize("k_sub", [0, 1])
def test_augment_time_grid_identity(k_sub):
    assert augment_time_grid(coarse_nodes(5), k_sub) == coarse_nodes(5)


def test_augment_time_grid_rejects_large_k_sub():
    with pytest.raises(ConfigurationError):
        augment_time_grid(TimeGrid(time_steps=5, k_sub=5))


def test_sde_step_deterministic_without_noise():
    x = torch.ones(3, dtype=torch.float64)
    b = torch.full((3,), 2.0, dtype=torch.float64)
    assert torch.allclose(sde_step(x, b, 0.0, 0.1), torch.full((3,), 1.2, dtype=torch.float64))


def test_sde_step_uses_given_noise():
    x = torch.zeros(3, dtype=torch.float64)
    noise = torch.tensor([1.0, -1.0, 0.5], dtype=torch.float64)
    out = sde_step(x, torch.zeros_like(x), 2.0, 0.25, noise=noise)
    assert torch.allclose(out, 2.0 * math.sqrt(0.25) * noise)


def test_sde_step_errors():
    x = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        sde_step(x, x, 0.0, 0.0)
    with pytest.raises(NumericalError):
        sde_step(x, torch.tensor([float("nan"), 0.0], dtype=torch.float64), 0.0, 0.1)


def test_memoryless_sde_preserves_gaussian_target():
    flow = AnalyticGaussianFlow(1.0, 0.5)
    rng = make_rng(2)
    x0 = torch.from_numpy(rng.standard_normal((20000, 1)))
    x1 = sample_sde(flow, x0, augment_time_grid(coarse_nodes(200)), NoiseSchedule(h=1.0 / 200), rng)
    assert float(x1.mean()) == pytest.approx(1.0, abs=0.05)
    assert float(x1.std()) == pytest.approx(0.5, abs=0.05)


def test_fm_pretrain_sets_standardization():
    torch.manual_seed(0)
    model = VectorFieldModel((9, 9), hidden=4, n_freq=1)
    data = 3.0 + 2.0 * torch.randn(8, 9, 9, dtype=torch.float64)
    history = fm_pretrain(model, data, make_rng(0), epochs=2, learning_rate=1e-3, batch_size=4, quiet=True)
    assert len(history.epoch_losses) == 2
    assert float(model.data_mean) == pytest.approx(float(data.mean()))
    assert float(model.data_std) == pytest.approx(float(data.std()))


def test_fm_pretrain_needs_data():
    model = VectorFieldModel((9, 9), hidden=4, n_freq=1)
    with pytest.raises(ConfigurationError):
        fm_pretrain(model, torch.zeros(0, 9, 9, dtype=torch.float64), make_rng(0), epochs=1)


def test_sample_base_returns_physical_units():
    torch.manual_seed(0)
    model = VectorFieldModel((9, 9), hidden=4, n_freq=1, zero_head=True)
    model.set_standardization(5.0, 0.0)
    out = sample_base(model, 5, make_rng(0), time_steps=4, batch_size=2)
    assert out.shape == (5, 9, 9)
    # zero velocity and zero std collapse every sample onto the mean
    assert torch.allclose(out, torch.full_like(out, 5.0))


def test_euler_sampler_converges_at_first_order():
    flow = AnalyticGaussianFlow(1.0, 0.5)
    x0 = torch.linspace(-2.0, 2.0, 9, dtype=torch.float64).reshape(9, 1)
    coarse, mid, fine = (sample_ode(flow, x0, coarse_nodes(n + 1)) for n in (16, 32, 64))
    ratio = float((coarse - mid).norm() / (mid - fine).norm())
    assert 1.5 <= ratio <= 2.5


def test_euler_and_noiseless_euler_maruyama_agree():
    flow = AnalyticGaussianFlow(1.0, 0.5)
    x0 = torch.randn(16, 1, dtype=torch.float64)
    nodes = coarse_nodes(9)
    assert torch.allclose(sample_sde(flow, x0, nodes, ZERO_SCHEDULE, make_rng(0)), sample_ode(flow, x0, nodes),
                          atol=1e-14)


@pytest.mark.slow
def test_fm_pretrain_reduces_loss_and_matches_data_moments():
    torch.manual_seed(0)
    rng = make_rng(0)
    axis = torch.linspace(0.0, 1.0, 9, dtype=torch.float64)
    mean_field = 3.0 * torch.sin(math.pi * axis)[:, None] * torch.sin(math.pi * axis)[None, :]
    data = mean_field + 0.1 * torch.from_numpy(rng.standard_normal((512, 9, 9)))
    model = VectorFieldModel((9, 9), hidden=16, n_freq=2)
    history = fm_pretrain(model, data, rng, epochs=60, learning_rate=3e-3, batch_size=64, quiet=True)
    assert history.final_loss <= 0.5 * history.initial_loss

    samples = sample_base(model, 1000, rng, time_steps=32, batch_size=250)
    rel_mean = float((samples.mean(dim=0) - mean_field).norm() / mean_field.norm())
    assert rel_mean <= 0.1
