"""Grids, fields, stencils, upsampling and GRF sampling."""
import math

import pytest
import torch

from src.models.schemas import GrfConfig
from src.physics.grid import (GridField, boundary_normal_gradient, central_gradient, grf_pointwise_covariance,
                              make_grid, sample_grf, space_time_grid, threshold_binary, upsample_trilinear)
from src.utils.errors import ConfigurationError, NumericalError
from src.utils.rng import make_rng


def test_spacing_and_quadrature_volume():
    grid = make_grid((5, 9), [(0.0, 2.0), (0.0, 1.0)])
    assert grid.spacing == (0.5, 0.125)
    assert float(grid.trapezoid_weights().sum()) == pytest.approx(2.0)


def test_refine_keeps_extents():
    grid = make_grid((9, 9)).refine(4)
    assert grid.dims == (33, 33)
    assert grid.upper == (1.0, 1.0)


def test_invalid_grid_is_configuration_error():
    with pytest.raises(ConfigurationError):
        make_grid((1, 9))
    with pytest.raises(ConfigurationError):
        make_grid((9, 9), [(0.0, 1.0)])


def test_space_time_grid_layout():
    grid = space_time_grid(17, 5, 0.3)
    assert grid.temporal
    assert grid.spatial_dims == (17, 17)
    assert grid.spatial().dims == (17, 17)
    assert grid.spacing[0] == pytest.approx(0.3 / 4)


def test_field_shape_and_finiteness_checks(grid9):
    with pytest.raises(ConfigurationError):
        GridField(grid9, torch.zeros(8, 9))
    bad = torch.zeros(9, 9)
    bad[3, 3] = float("nan")
    with pytest.raises(NumericalError):
        GridField(grid9, bad)
    assert GridField(grid9, torch.zeros(4, 9, 9)).batch_shape == (4,)


def test_central_gradient_exact_on_quadratics(grid9):
    x, y = grid9.coords()
    gx, gy = central_gradient(GridField(grid9, x ** 2 + 3 * y))
    assert torch.allclose(gx.values, 2 * x, atol=1e-12)
    assert torch.allclose(gy.values, torch.full_like(y, 3.0), atol=1e-12)


def test_boundary_normal_gradient_signs(grid9):
    x, _ = grid9.coords()
    g = boundary_normal_gradient(GridField(grid9, x))
    n = 7  # non-corner nodes per edge
    assert torch.allclose(g[:n], torch.full((n,), -1.0, dtype=g.dtype))
    assert torch.allclose(g[n:2 * n], torch.full((n,), 1.0, dtype=g.dtype))
    assert torch.allclose(g[2 * n:], torch.zeros(2 * n, dtype=g.dtype), atol=1e-12)


def test_upsample_reproduces_bilinear_fields(grid9):
    x, y = grid9.coords()
    field = GridField(grid9, 1.0 + 2.0 * x - y + 0.5 * x * y)
    fine = upsample_trilinear(field, 4)
    fx, fy = fine.grid.coords()
    assert fine.grid.dims == (33, 33)
    assert torch.allclose(fine.values, 1.0 + 2.0 * fx - fy + 0.5 * fx * fy, atol=1e-12)


def test_upsample_space_time_batch(acoustic_grid):
    field = GridField(acoustic_grid, torch.randn(2, *acoustic_grid.dims, dtype=torch.float64))
    fine = upsample_trilinear(field, 2)
    assert fine.values.shape == (2, 9, 17, 17)
    assert torch.allclose(fine.values[..., ::2, ::2, ::2], field.values)


@pytest.mark.parametrize("factor", [1, 0, 2.5])
def test_upsample_rejects_bad_factor(grid9, factor):
    with pytest.raises(ConfigurationError):
        upsample_trilinear(GridField(grid9, torch.zeros(9, 9)), factor)


def test_grf_is_deterministic_per_seed(grid9):
    cfg = GrfConfig(modes=8)
    a = sample_grf(grid9, cfg, make_rng(7), n=3)
    b = sample_grf(grid9, cfg, make_rng(7), n=3)
    c = sample_grf(grid9, cfg, make_rng(8), n=3)
    assert a.values.shape == (3, 9, 9)
    assert torch.equal(a.values, b.values)
    assert not torch.equal(a.values, c.values)


def test_grf_empirical_variance_matches_series():
    grid = make_grid((9, 9))
    cfg = GrfConfig(modes=8)
    samples = sample_grf(grid, cfg, make_rng(3), n=4000).values
    expected = grf_pointwise_covariance(grid, cfg, (4, 4), (4, 4))
    assert float(samples[:, 4, 4].var()) == pytest.approx(expected, rel=0.1)


def test_threshold_binary_levels(grid9):
    raw = GridField(grid9, torch.linspace(-1, 1, 81, dtype=torch.float64).reshape(9, 9))
    out = threshold_binary(raw, 3.0, 12.0)
    assert set(out.values.unique().tolist()) == {3.0, 12.0}
    assert float(out.values[0, 0]) == 3.0
    assert float(out.values[-1, -1]) == 12.0
    with pytest.raises(ConfigurationError):
        threshold_binary(raw, 12.0, 3.0)


def test_central_gradient_is_second_order_on_sine():
    errors = []
    for n in (17, 33):
        grid = make_grid((n, n))
        x, _ = grid.coords()
        gx, _ = central_gradient(GridField(grid, torch.sin(math.pi * x)))
        errors.append(float((gx.values - math.pi * torch.cos(math.pi * x)).abs().max()))
    assert 3.2 <= errors[0] / errors[1] <= 4.8


@pytest.mark.parametrize("dims", [(9, 9), (5, 9, 9)])
def test_upsample_stays_within_coarse_range(dims):
    grid = make_grid(dims, temporal=len(dims) == 3)
    field = GridField(grid, torch.randn(3, *dims, dtype=torch.float64))
    fine = upsample_trilinear(field, 3).values
    lo = field.values.flatten(1).min(dim=1).values
    hi = field.values.flatten(1).max(dim=1).values
    assert (fine.flatten(1).min(dim=1).values >= lo - 1e-12).all()
    assert (fine.flatten(1).max(dim=1).values <= hi + 1e-12).all()


def test_grf_mean_and_two_point_covariance():
    grid = make_grid((9, 9))
    cfg = GrfConfig(modes=8)
    samples = sample_grf(grid, cfg, make_rng(5), n=40000).values
    std = samples.std(dim=0)
    assert float((samples.mean(dim=0).abs() / std).max()) < 0.05
    for p, q in [((4, 4), (5, 4)), ((2, 6), (3, 5)), ((1, 1), (1, 1))]:
        empirical = float((samples[:, p[0], p[1]] * samples[:, q[0], q[1]]).mean())
        expected = grf_pointwise_covariance(grid, cfg, p, q)
        scale = math.sqrt(grf_pointwise_covariance(grid, cfg, p, p) * grf_pointwise_covariance(grid, cfg, q, q))
        assert abs(empirical - expected) <= 0.05 * scale


def test_grf_has_no_constant_mode():
    grid = make_grid((9, 9))
    samples = sample_grf(grid, GrfConfig(modes=8), make_rng(9), n=5).values
    # cosine modes with k >= 1 integrate to zero under the trapezoid rule
    averages = (grid.trapezoid_weights() * samples).sum(dim=(-2, -1))
    assert torch.allclose(averages, torch.zeros(5, dtype=torch.float64), atol=1e-12)
