"""Test functions, weak/strong/boundary residuals and the physics terminal cost."""
import math

import pytest
import torch

from src.models.schemas import (BoundaryCondition, NormalizerMode, ProblemKind, StrongStencil,
                                TestBatchConfig)
from src.physics.grid import GridField, make_grid
from src.physics.pde import DarcyProblem, solve_darcy
from src.physics.weakform import (PhysicsReward, ResidualProblem, TestFunction, TestFunctionBatch,
                                  boundary_residual, eval_test_function, grad_weak_residual, residual_heatmap,
                                  sample_test_functions, strong_residual, weak_inner_and_norm, weak_inner_darcy,
                                  weak_residual, weak_terms)
from src.pipeline.oracles import gradcheck
from src.utils.errors import ConfigurationError, DegenerateParameterError
from src.utils.rng import make_rng


def _manufactured(n):
    grid = make_grid((n, n))
    x, y = grid.coords()
    a = 1.0 + x
    u = torch.sin(math.pi * x) * torch.sin(math.pi * y)
    f = 2 * math.pi ** 2 * a * u - math.pi * torch.cos(math.pi * x) * torch.sin(math.pi * y)
    return grid, u, a, f


def test_test_function_vanishes_on_the_boundary(grid9):
    ev = eval_test_function(TestFunction(center=(0.05, 0.5), scales=(0.3, 0.3)), grid9)
    rows = ev.index[0][0]
    assert int(rows[0]) == 0
    assert torch.allclose(ev.psi[0, 0], torch.zeros_like(ev.psi[0, 0]))
    assert float(ev.psi.abs().max()) > 0


def test_wavelet_flag_changes_sign_structure(grid9):
    plain = eval_test_function(TestFunction((0.5, 0.5), (0.4, 0.4), wavelet=False), grid9)
    wave = eval_test_function(TestFunction((0.5, 0.5), (0.4, 0.4), wavelet=True), grid9)
    assert float(plain.psi.min()) >= 0
    assert float(wave.psi.min()) < 0
    assert torch.equal(plain.plain, wave.plain)


def test_invalid_test_function():
    with pytest.raises(ConfigurationError):
        TestFunction((0.5, 0.5), (0.0, 0.1))


def test_sampling_is_seeded_and_per_node(grid9):
    cfg = TestBatchConfig(sigma_min=1.0, sigma_max=2.0)
    a = sample_test_functions(grid9, cfg, make_rng(5))
    b = sample_test_functions(grid9, cfg, make_rng(5))
    assert torch.equal(a.centers, b.centers)
    assert 0 < len(a) <= 81
    scales_px = a.scales / torch.tensor(grid9.spacing, dtype=torch.float64)
    assert float(scales_px.min()) >= 1.0 and float(scales_px.max()) <= 2.0


def test_weak_residual_of_exact_pair_is_small():
    grid, u, a, f = _manufactured(65)
    tfs = sample_test_functions(grid, TestBatchConfig(n_test=200, per_node=False, sigma_min=3, sigma_max=6),
                                make_rng(0))
    exact = ResidualProblem(ProblemKind.DARCY, grid, forcing=f)
    wrong = ResidualProblem(ProblemKind.DARCY, grid)
    assert float(weak_residual(u, a, exact, tfs)) < 1e-2 * float(weak_residual(u, a, wrong, tfs))


def test_weak_and_strong_inner_products_agree():
    grid, u, a, f = _manufactured(65)
    tf = TestFunction((0.4, 0.55), (0.15, 0.2))
    lhs = weak_inner_darcy(u, a, f + 1.0, tf, grid)
    ev = eval_test_function(tf, grid)
    # strong form of the same operator: -div(a grad u) - (f + 1) = -1
    rhs = -(ev.weights * ev.psi).sum()
    assert float(lhs) == pytest.approx(float(rhs), rel=1e-2)


def test_weak_inner_of_exact_solution_decays_at_second_order():
    tf = TestFunction((0.4, 0.55), (0.15, 0.2))
    errors = []
    for n in (33, 65):
        grid, u, a, f = _manufactured(n)
        errors.append(abs(float(weak_inner_darcy(u, a, f, tf, grid))))
    assert 3.0 <= errors[0] / errors[1] <= 5.0


def test_strong_residual_of_exact_solution_decays_at_second_order():
    norms = []
    for n in (33, 65):
        grid, u, a, f = _manufactured(n)
        norms.append(math.sqrt(float(strong_residual(u, a, ResidualProblem(ProblemKind.DARCY, grid, forcing=f)))))
    assert 3.0 <= norms[0] / norms[1] <= 5.0


def test_unforced_terms_are_invariant_to_parameter_scaling(grid9, rng):
    problem = ResidualProblem(ProblemKind.DARCY, grid9, forcing=torch.zeros(9, 9, dtype=torch.float64))
    tfs = sample_test_functions(grid9, TestBatchConfig(n_test=10, per_node=False), rng)
    u = torch.randn(9, 9, dtype=torch.float64)
    a = 3.0 + torch.rand(9, 9, dtype=torch.float64)
    assert torch.allclose(weak_terms(u, 2 * a, problem, tfs), weak_terms(u, a, problem, tfs), rtol=1e-10)
    _, ga = grad_weak_residual(u, a, problem, tfs)
    # zero directional derivative along a -> (1 + eps) a
    assert abs(float((ga.values * a).sum())) <= 1e-8 * float(ga.values.norm() * a.norm())


def test_weak_residual_batches_and_broadcasts(darcy9, rng):
    tfs = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=10, per_node=False), rng)
    u = torch.randn(3, 9, 9, dtype=torch.float64)
    a = torch.full((9, 9), 2.0, dtype=torch.float64)
    batched = weak_residual(u, a, darcy9, tfs)
    assert batched.shape == (3,)
    assert float(weak_residual(u[1], a, darcy9, tfs)) == pytest.approx(float(batched[1]))
    assert weak_terms(u, a, darcy9, tfs).shape == (3, len(tfs))


def test_shape_mismatch_is_configuration_error(darcy9, rng):
    tfs = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=4, per_node=False), rng)
    with pytest.raises(ConfigurationError):
        weak_residual(torch.zeros(8, 8, dtype=torch.float64), torch.ones(9, 9, dtype=torch.float64), darcy9, tfs)


def test_zero_parameter_is_degenerate(darcy9, rng):
    tfs = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=4, per_node=False), rng)
    with pytest.raises(DegenerateParameterError):
        weak_residual(torch.ones(9, 9, dtype=torch.float64), torch.zeros(9, 9, dtype=torch.float64), darcy9, tfs)


def test_near_zero_parameter_normalizer_is_floored(darcy9, rng):
    tfs = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=6, per_node=False), rng)
    u = torch.randn(9, 9, dtype=torch.float64)
    ones = torch.ones(9, 9, dtype=torch.float64)
    _, plain = weak_inner_and_norm(u, ones, darcy9, tfs)
    _, tiny = weak_inner_and_norm(u, 1e-9 * ones, darcy9, tfs)
    assert torch.allclose(tiny, darcy9.alpha_floor * plain)
    terms = weak_terms(u, 1e-9 * ones, darcy9, tfs)
    assert torch.isfinite(terms).all()
    with pytest.raises(DegenerateParameterError):
        weak_residual(u, -ones, darcy9, tfs)


def test_box_normalizer_differs_from_weighted(rng):
    grid = make_grid((9, 9))
    tfs = sample_test_functions(grid, TestBatchConfig(n_test=6, per_node=False), rng)
    u = torch.randn(9, 9, dtype=torch.float64)
    a = torch.full((9, 9), 3.0, dtype=torch.float64)
    weighted = weak_residual(u, a, ResidualProblem(ProblemKind.DARCY, grid), tfs)
    box = weak_residual(u, a, ResidualProblem(ProblemKind.DARCY, grid, normalizer=NormalizerMode.BOX), tfs)
    assert float(box) < float(weighted)


def test_strong_residual_vanishes_on_solver_output():
    grid = make_grid((17, 17))
    a = torch.full((17, 17), 4.0, dtype=torch.float64)
    u = solve_darcy(DarcyProblem(GridField(grid, a))).values
    problem = ResidualProblem(ProblemKind.DARCY, grid)
    assert float(strong_residual(u, a, problem)) < 1e-10
    assert float(strong_residual(u, a, problem, StrongStencil.CENTRAL)) > 0


def test_acoustic_strong_residual_of_static_field(acoustic_grid):
    problem = ResidualProblem(ProblemKind.ACOUSTIC, acoustic_grid)
    p = torch.ones(acoustic_grid.dims, dtype=torch.float64)
    c = torch.full(acoustic_grid.spatial_dims, 2.0, dtype=torch.float64)
    assert float(strong_residual(p, c, problem)) == pytest.approx(0.0, abs=1e-20)


def test_boundary_residuals(grid9):
    zero = torch.zeros(2, 9, 9, dtype=torch.float64)
    assert torch.equal(boundary_residual(zero, BoundaryCondition.DIRICHLET_ZERO, grid9), torch.zeros(2, dtype=torch.float64))
    top = boundary_residual(zero, BoundaryCondition.DIRICHLET_TOP_SIN, grid9)
    assert float(top[0]) > 0
    x, _ = grid9.coords()
    neumann = boundary_residual(x, BoundaryCondition.NEUMANN_REFLECTIVE, grid9)
    # |dn u| = 1 on the two xi_1 edges, 0 on the xi_2 edges
    assert float(neumann) == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        boundary_residual(zero, BoundaryCondition.NONE, grid9)


def test_residual_heatmap_shape_and_scale_check(darcy9):
    u = torch.randn(9, 9, dtype=torch.float64)
    a = torch.full((9, 9), 2.0, dtype=torch.float64)
    heat = residual_heatmap(u, a, darcy9, 1.5)
    assert heat.values.shape == (9, 9)
    assert float(heat.values.min()) >= 0
    with pytest.raises(ConfigurationError):
        residual_heatmap(u, a, darcy9, 5.0)


def test_grad_weak_residual_matches_autograd_directional_difference(darcy9, rng):
    tfs = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=12, per_node=False), rng)
    u = torch.randn(9, 9, dtype=torch.float64)
    a = 2.0 + torch.rand(9, 9, dtype=torch.float64)
    gu, ga = grad_weak_residual(u, a, darcy9, tfs)
    du, da = torch.randn_like(u), torch.randn_like(a)
    eps = 1e-6
    fd = (weak_residual(u + eps * du, a + eps * da, darcy9, tfs)
          - weak_residual(u - eps * du, a - eps * da, darcy9, tfs)) / (2 * eps)
    ad = (gu.values * du).sum() + (ga.values * da).sum()
    assert float(fd) == pytest.approx(float(ad), rel=1e-5)


def test_gradcheck_bench_quick():
    report = gradcheck(seed=0, quick=True)
    assert report["passed"], report


def test_physics_reward_gradient_scaling(darcy9, rng):
    fixed = sample_test_functions(darcy9.grid, TestBatchConfig(n_test=8, per_node=False), rng)
    reward = PhysicsReward(darcy9, TestBatchConfig(), rng, boundary_weight=1.0, fixed_tests=fixed)
    x = torch.randn(2, 9, 9, dtype=torch.float64)
    a = torch.full((2, 9, 9), 5.0, dtype=torch.float64)
    gx1, ga1, g = reward.terminal_gradient(x, a, 1.0, 1.0)
    gx2, ga2, _ = reward.terminal_gradient(x, a, 2.0, 0.5)
    assert g.shape == (2,)
    assert torch.allclose(gx2, 2 * gx1)
    assert torch.allclose(ga2, 0.5 * ga1)
    expected = weak_residual(x, a, darcy9, fixed) + boundary_residual(x, BoundaryCondition.DIRICHLET_ZERO, darcy9.grid)
    assert torch.allclose(g, expected)


def test_batch_round_trip_through_functions():
    batch = TestFunctionBatch.from_functions([TestFunction((0.2, 0.3), (0.1, 0.2), True),
                                              TestFunction((0.7, 0.4), (0.2, 0.1), False)])
    assert batch.to_functions()[0].wavelet is True
    assert len(batch[1]) == 1
