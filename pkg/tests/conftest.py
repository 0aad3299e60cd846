"""Shared fixtures: small grids, seeded streams and tiny models."""
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.models.schemas import ProblemKind
from src.networks.architectures import FinetuneModel, InversePredictor, VectorFieldModel
from src.physics.grid import make_grid, space_time_grid
from src.physics.weakform import ResidualProblem
from src.utils.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def grid9():
    return make_grid((9, 9))


@pytest.fixture
def darcy9(grid9):
    return ResidualProblem(ProblemKind.DARCY, grid9)


@pytest.fixture
def acoustic_grid():
    return space_time_grid(9, 5, 0.04)


@pytest.fixture
def tiny_models():
    """(base, phi, ft) on a 9x9 grid; ft is freshly zero-initialized."""
    torch.manual_seed(0)
    base = VectorFieldModel((9, 9), hidden=4, n_freq=1)
    phi = InversePredictor((9, 9), (1.0, 12.0), hidden=4, n_freq=1)
    ft = FinetuneModel(base, hidden=4, alpha_scale=6.0)
    return base, phi, ft
