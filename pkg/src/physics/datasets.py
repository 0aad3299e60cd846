"""Dataset generation: GRF parameter -> threshold -> solve or simulate -> optional noise."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from ..models.schemas import ArtifactRole, BoundaryCondition, DatasetSpec, GrfConfig, ProblemKind
from ..store.manifest_db import ManifestDatabase
from ..store.tensor_io import save_tensor
from ..utils.config import PROBLEM_PRESETS, get_settings
from ..utils.errors import PdeFlowError
from ..utils.logging_setup import progress_disabled
from ..utils.rng import spawn_rngs
from .grid import Grid, GridField, make_grid, sample_grf, space_time_grid, threshold_binary
from .pde import (AcousticProblem, DarcyProblem, add_observation_noise, gaussian_bumps,
                  simulate_acoustic, solve_darcy)

logger = logging.getLogger(__name__)

STATES_FILE = "states.pdfl"
PARAMS_FILE = "params.pdfl"


@dataclass
class DatasetInfo:
    root: Path
    grid: Grid
    param_grid: Grid
    n_samples: int
    noise_sigma: float
    bc: BoundaryCondition


def _problem_grid(spec: DatasetSpec, preset: dict) -> Tuple[Grid, Grid]:
    param_grid = make_grid((spec.size, spec.size))
    if preset["kind"] == ProblemKind.ACOUSTIC.value:
        frames = spec.frames or get_settings().ACOUSTIC_FRAMES
        stepper = AcousticProblem(
            speed=GridField(param_grid, torch.full(param_grid.dims, preset["values"][1], dtype=torch.float64)),
            initial=GridField(param_grid, torch.zeros(param_grid.dims, dtype=torch.float64)),
            dt=preset["dt"], frames=frames, horizon=preset["horizon"])
        return space_time_grid(spec.size, frames, stepper.recorded_horizon), param_grid
    return param_grid, param_grid


def _clean_sample(index: int, rng: np.random.Generator, spec: DatasetSpec, preset: dict,
                  grf: GrfConfig, param_grid: Grid, frames: Optional[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    raw = sample_grf(param_grid, grf, rng)
    lo, hi = preset["values"]
    param = threshold_binary(raw, lo, hi)
    if preset["kind"] == ProblemKind.DARCY.value:
        problem = DarcyProblem(permeability=param, bc=BoundaryCondition(preset["bc"]))
        state = solve_darcy(problem, sample=index)
    else:
        problem = AcousticProblem(speed=param,
                                  initial=gaussian_bumps(param_grid, variance=preset["bump_variance"]),
                                  dt=preset["dt"], frames=frames, horizon=preset["horizon"])
        state = simulate_acoustic(problem, sample=index)
    return state.values, param.values


def generate_dataset(spec: DatasetSpec, out_dir: Union[str, Path], quiet: bool = False) -> DatasetInfo:
    """Generate, persist and register a dataset; deterministic given spec.seed."""
    preset = PROBLEM_PRESETS[spec.problem]
    settings = get_settings()
    grf = spec.grf or GrfConfig(**preset["grf"])
    grid, param_grid = _problem_grid(spec, preset)
    frames = grid.dims[0] if grid.temporal else None
    rngs = spawn_rngs(spec.seed, spec.n_samples)

    def work(i: int):
        try:
            return _clean_sample(i, rngs[i], spec, preset, grf, param_grid, frames)
        except PdeFlowError:
            raise
        except Exception as e:
            raise PdeFlowError(f"sample {i}: {e}") from e

    with ThreadPoolExecutor(max_workers=settings.thread_count()) as pool:
        results = list(tqdm(pool.map(work, range(spec.n_samples)), total=spec.n_samples,
                            desc=f"gen {spec.problem}", disable=progress_disabled(quiet)))
    states = torch.stack([r[0] for r in results])
    params = torch.stack([r[1] for r in results])

    # second pass: noise level may depend on the whole clean set
    sigma = spec.noise_sigma
    if sigma is None:
        sigma = preset.get("noise_fraction", 0.1) * float(states.std()) if preset.get("noisy") else 0.0
    if sigma > 0:
        states = torch.stack([
            add_observation_noise(GridField(grid, states[i]), sigma, rngs[i]).values
            for i in range(spec.n_samples)
        ])

    out = Path(out_dir)
    save_tensor(out / STATES_FILE, states, "float32")
    save_tensor(out / PARAMS_FILE, params, "float32")
    bc = BoundaryCondition(preset["bc"])
    meta = {
        "spec": spec.model_dump(mode="json"),
        "dims": list(grid.dims),
        "lower": list(grid.lower),
        "upper": list(grid.upper),
        "temporal": grid.temporal,
        "bc": bc.value,
        "values": list(preset["values"]),
        "noise_sigma": sigma,
        "n_samples": spec.n_samples,
    }
    db = ManifestDatabase(out)
    db.add("states", STATES_FILE, ArtifactRole.STATE, seed=spec.seed, problem_kind=preset["kind"], **meta)
    db.add("params", PARAMS_FILE, ArtifactRole.PARAM, seed=spec.seed, problem_kind=preset["kind"],
           dims=list(param_grid.dims), note="ground truth, evaluation only")
    logger.info("wrote %d %s samples to %s (noise sigma %.4g)", spec.n_samples, spec.problem, out, sigma)
    return DatasetInfo(out, grid, param_grid, spec.n_samples, sigma, bc)
