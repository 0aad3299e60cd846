"""Darcy and acoustic ground-truth solvers."""
import math

import pytest
import torch

from src.models.schemas import BoundaryCondition, GrfConfig
from src.physics.grid import GridField, make_grid, sample_grf, threshold_binary
from src.physics.pde import (AcousticProblem, DarcyProblem, acoustic_energy, add_observation_noise, darcy_operator,
                             gaussian_bumps, simulate_acoustic, solve_darcy)
from src.pipeline.oracles import acoustic_eigenmode, manufactured_darcy
from src.utils.errors import ConfigurationError
from src.utils.rng import make_rng


def _ones(grid, value=1.0):
    return GridField(grid, torch.full(grid.dims, value, dtype=torch.float64))


def test_poisson_peak_and_symmetry():
    grid = make_grid((33, 33))
    u = solve_darcy(DarcyProblem(_ones(grid))).values
    assert float(u.max()) == pytest.approx(0.0737, abs=2e-3)
    assert torch.allclose(u, u.T, atol=1e-8)
    assert torch.allclose(u, u.flip(0), atol=1e-8)
    assert float(u[0].abs().max()) == 0.0


def test_discrete_solution_satisfies_stencil():
    grid = make_grid((17, 17))
    x, _ = grid.coords()
    a = 1.0 + x
    u = solve_darcy(DarcyProblem(GridField(grid, a))).values
    residual = darcy_operator(u.unsqueeze(0), a.unsqueeze(0), grid)[0] - 1.0
    assert float(residual.abs().max()) < 1e-6


def test_top_sin_boundary_values():
    grid = make_grid((17, 17))
    u = solve_darcy(DarcyProblem(_ones(grid), bc=BoundaryCondition.DIRICHLET_TOP_SIN)).values
    x = grid.axis(0)
    assert torch.allclose(u[:, -1], torch.sin(math.pi * x), atol=1e-12)
    assert float(u[:, 0].abs().max()) == 0.0


def test_darcy_rejects_bad_inputs():
    grid = make_grid((9, 9))
    with pytest.raises(ConfigurationError):
        DarcyProblem(_ones(grid, -1.0))
    with pytest.raises(ConfigurationError):
        DarcyProblem(_ones(grid), bc=BoundaryCondition.NEUMANN_REFLECTIVE)


def test_manufactured_solution_converges_at_second_order():
    report = manufactured_darcy(quick=True)
    assert report["passed"], report
    assert 3.2 <= report["ratio"] <= 4.8


def test_acoustic_eigenmode_bench():
    report = acoustic_eigenmode(quick=True)
    assert report["passed"], report


def test_acoustic_recording_layout():
    sgrid = make_grid((17, 17))
    problem = AcousticProblem(speed=_ones(sgrid, 2.0), initial=gaussian_bumps(sgrid), dt=1e-3, frames=9,
                              horizon=0.08)
    assert problem.record_stride == 10
    p = simulate_acoustic(problem)
    assert p.values.shape == (9, 17, 17)
    assert torch.equal(p.values[0], problem.initial.values)
    assert p.grid.upper[0] == pytest.approx(problem.recorded_horizon)


def test_acoustic_energy_is_conserved_for_bumps():
    sgrid = make_grid((33, 33))
    speed = torch.full(sgrid.dims, 3.0, dtype=torch.float64)
    problem = AcousticProblem(speed=GridField(sgrid, speed), initial=gaussian_bumps(sgrid), dt=1e-3, frames=33,
                              horizon=0.032)
    assert problem.record_stride == 1
    energy = acoustic_energy(simulate_acoustic(problem), speed)
    assert float((energy - energy[0]).abs().max() / energy[0]) < 0.01


def test_cfl_violation_is_rejected():
    sgrid = make_grid((33, 33))
    problem = AcousticProblem(speed=_ones(sgrid, 100.0), initial=gaussian_bumps(sgrid), dt=1e-3, frames=5,
                              horizon=0.004)
    with pytest.raises(ConfigurationError):
        simulate_acoustic(problem)


def test_darcy_maximum_principle_on_binary_coefficient():
    grid = make_grid((33, 33))
    raw = sample_grf(grid, GrfConfig(modes=16), make_rng(2))
    perm = threshold_binary(raw, 3.0, 12.0)
    u = solve_darcy(DarcyProblem(perm)).values
    # nonnegative source with zero boundary data
    assert float(u.min()) >= -1e-8
    assert float(u[1:-1, 1:-1].min()) > 0
    zero = GridField(grid, torch.zeros(grid.dims, dtype=torch.float64))
    harmonic = solve_darcy(DarcyProblem(perm, forcing=zero, bc=BoundaryCondition.DIRICHLET_TOP_SIN)).values
    # no source: extremes sit on the boundary, where the data lies in [0, 1]
    assert float(harmonic.min()) >= -1e-8
    assert float(harmonic.max()) <= 1.0 + 1e-8


def test_observation_noise_residuals_are_chi_square():
    grid = make_grid((33, 33))
    clean = GridField(grid, torch.sin(math.pi * grid.coords()[0]).expand(4, 33, 33).clone())
    sigma = 0.05
    noisy = add_observation_noise(clean, sigma, make_rng(4))
    chi2 = float((((noisy.values - clean.values) / sigma) ** 2).sum())
    dof = clean.values.numel()
    assert abs(chi2 / dof - 1.0) < 0.1
    assert add_observation_noise(clean, 0.0, make_rng(4)) is clean
