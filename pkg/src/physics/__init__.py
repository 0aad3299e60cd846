"""Grids, PDE solvers, dataset generation and weak-form residuals."""
from .datasets import DatasetInfo, generate_dataset
from .grid import (Grid, GridField, boundary_normal_gradient, central_gradient, make_grid, sample_grf,
                   space_time_grid, threshold_binary, upsample_trilinear)
from .pde import (AcousticProblem, DarcyProblem, acoustic_energy, simulate_acoustic, solve_darcy)
from .weakform import (PhysicsReward, ResidualProblem, TestFunction, TestFunctionBatch, boundary_residual,
                       eval_test_function, grad_weak_residual, residual_heatmap, sample_test_functions,
                       strong_residual, weak_residual)

__all__ = [
    "DatasetInfo", "generate_dataset",
    "Grid", "GridField", "boundary_normal_gradient", "central_gradient", "make_grid", "sample_grf",
    "space_time_grid", "threshold_binary", "upsample_trilinear",
    "AcousticProblem", "DarcyProblem", "acoustic_energy", "simulate_acoustic", "solve_darcy",
    "PhysicsReward", "ResidualProblem", "TestFunction", "TestFunctionBatch", "boundary_residual",
    "eval_test_function", "grad_weak_residual", "residual_heatmap", "sample_test_functions",
    "strong_residual", "weak_residual",
]
