"""
Sampling and evaluation of trained models.

Joint and guided sampling, residual tables, super-resolution residuals,
moment statistics and PNG export.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from PIL import Image

from ..models.schemas import (BoundaryCondition, GuidanceConfig, NoiseKind, NoiseSchedule, ResidualReport,
                              SparseObservations, StatReport, TestBatchConfig, TimeGrid)
from ..networks.architectures import FinetuneModel
from ..physics.grid import GridField, upsample_trilinear
from ..physics.weakform import (ResidualProblem, boundary_residual, sample_test_functions, strong_residual,
                                weak_terms)
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.rng import make_rng, standard_normal
from .finetune import JointDynamics
from .flow import ZERO_SCHEDULE, coarse_nodes, drift, sample_ode, sde_step, sigma

logger = logging.getLogger(__name__)


# ============== Guidance ==============

def _obs_index(obs: SparseObservations, spatial_dims: Sequence[int]) -> Tuple[torch.Tensor, ...]:
    idx = torch.tensor(obs.indices, dtype=torch.long)
    if idx.dim() != 2 or idx.shape[1] != len(spatial_dims):
        raise ConfigurationError(f"observation indices must have {len(spatial_dims)} components")
    for j, n in enumerate(spatial_dims):
        if (idx[:, j] < 0).any() or (idx[:, j] >= n).any():
            raise ConfigurationError(f"observation index outside the grid along axis {j}")
    return tuple(idx[:, j] for j in range(idx.shape[1]))


def observed_values(alpha: torch.Tensor, obs: SparseObservations) -> torch.Tensor:
    """alpha at the observed nodes: (..., m)."""
    idx = _obs_index(obs, alpha.shape[-2:])
    return alpha[(Ellipsis,) + idx]


def guidance_loss(alpha_hat: torch.Tensor, obs: SparseObservations) -> torch.Tensor:
    """(1/m) sum_i |alpha_hat(xi_i) - alpha_i*|^2, per sample when batched."""
    target = torch.tensor(obs.values, dtype=alpha_hat.dtype)
    return ((observed_values(alpha_hat, obs) - target) ** 2).mean(dim=-1)


def _joint_euler(dyn: JointDynamics, x0: torch.Tensor, alpha0: torch.Tensor, nodes: List[float],
                 schedule: NoiseSchedule, rng: Optional[np.random.Generator],
                 obs: Optional[SparseObservations] = None, zeta: float = 0.0) -> Tuple[torch.Tensor, torch.Tensor]:
    x, alpha = x0, alpha0
    for k in range(len(nodes) - 1):
        t, dt = nodes[k], nodes[k + 1] - nodes[k]
        s = sigma(t, schedule)
        if zeta > 0:
            xg = x.detach().clone().requires_grad_(True)
            ag = alpha.detach().clone().requires_grad_(True)
            with torch.enable_grad():
                _, v_ab, _ = dyn.base_fields(xg, ag, t)
                v_x, v_a = dyn.ft_velocity(xg, ag, v_ab, t)
                loss = guidance_loss(ag + (1.0 - t) * v_a, obs).sum()
                gx, ga = torch.autograd.grad(loss, (xg, ag))
            v_x, v_a = v_x.detach(), v_a.detach()
        else:
            with torch.no_grad():
                _, v_ab, _ = dyn.base_fields(x, alpha, t)
                v_x, v_a = dyn.ft_velocity(x, alpha, v_ab, t)
        with torch.no_grad():
            b_x, b_a = drift(v_x, x, t, schedule), drift(v_a, alpha, t, schedule)
            if s > 0:
                x = sde_step(x, b_x, s, dt, rng, step=k)
                alpha = sde_step(alpha, b_a, s, dt, rng, step=k)
            else:
                x = x + dt * b_x
                alpha = alpha + dt * b_a
            if zeta > 0:
                x = x - zeta * dt * gx
                alpha = alpha - zeta * dt * ga
            if not (torch.isfinite(x).all() and torch.isfinite(alpha).all()):
                raise NumericalError("non-finite state in joint sampler", step=k)
    return x, alpha


def sample_joint(dyn: JointDynamics, x0: torch.Tensor, alpha0: torch.Tensor, time_steps: int,
                 schedule: NoiseSchedule = ZERO_SCHEDULE,
                 rng: Optional[np.random.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unguided joint Euler sampling; x is returned in model space."""
    return _joint_euler(dyn, x0, alpha0, coarse_nodes(time_steps), schedule, rng)


def guided_sample(dyn: JointDynamics, obs: SparseObservations, cfg: GuidanceConfig, x0: torch.Tensor,
                  alpha0: torch.Tensor, rng: Optional[np.random.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Joint sampling with -zeta grad L_guide injected into every step; zeta = 0 skips the gradient."""
    return _joint_euler(dyn, x0, alpha0, coarse_nodes(cfg.time_steps), cfg.schedule, rng, obs, cfg.zeta)


def sample_observations(param: torch.Tensor, m: int, rng: np.random.Generator) -> SparseObservations:
    """m distinct nodes drawn uniformly from a ground-truth parameter field."""
    dims = param.shape[-2:]
    total = int(np.prod(dims))
    if not 1 <= m <= total:
        raise ConfigurationError(f"cannot observe {m} of {total} nodes")
    flat = rng.choice(total, size=m, replace=False)
    idx = [tuple(int(i) for i in np.unravel_index(f, dims)) for f in flat]
    values = [float(param[i]) for i in idx]
    return SparseObservations(indices=idx, values=values)


def inference_dynamics(model: FinetuneModel, phi: nn.Module, param_grid, floor: float) -> JointDynamics:
    return JointDynamics(model.base, model, NoiseSchedule(kind=NoiseKind.ZERO, h=0.0), floor, phi, param_grid)


def sweep_zeta(dyn: JointDynamics, obs: SparseObservations, zetas: Sequence[float], n: int, time_steps: int,
               seed: int) -> pd.DataFrame:
    """Observed-node mismatch and spread for each guidance strength on shared initial noise."""
    rng = make_rng(seed)
    x0 = standard_normal(rng, (n, *dyn.ft.dims))
    a0 = standard_normal(rng, (n, *dyn.ft.spatial_dims))
    rows = []
    for zeta in zetas:
        _, alpha = guided_sample(dyn, obs, GuidanceConfig(zeta=zeta, time_steps=time_steps), x0, a0)
        rows.append({"zeta": zeta, "mismatch": float(guidance_loss(alpha, obs).mean()),
                     "observed_variance": float(observed_values(alpha, obs).var(dim=0, unbiased=False).mean())})
    return pd.DataFrame(rows)


# ============== Generation ==============

def generate_pairs(model: nn.Module, phi: nn.Module, n: int, rng: np.random.Generator, time_steps: int,
                   param_grid=None, floor: Optional[float] = None,
                   batch_size: int = 16) -> Tuple[torch.Tensor, torch.Tensor]:
    """n physical-unit (x, alpha) pairs: joint sampling for fine-tuned models, phi(x) for base models."""
    xs, alphas = [], []
    floor = floor if floor is not None else 1.0 / (time_steps - 1)
    for s in range(0, n, batch_size):
        b = min(batch_size, n - s)
        x0 = standard_normal(rng, (b, *model.dims))
        if isinstance(model, FinetuneModel):
            dyn = inference_dynamics(model, phi, param_grid, floor)
            a0 = standard_normal(rng, (b, *model.spatial_dims))
            x1, a1 = sample_joint(dyn, x0, a0, time_steps)
            xs.append(model.destandardize(x1))
            alphas.append(a1)
        else:
            x1 = model.destandardize(sample_ode(model, x0, TimeGrid(time_steps=time_steps)))
            with torch.no_grad():
                alphas.append(phi(x1))
            xs.append(x1)
    return torch.cat(xs), torch.cat(alphas)


# ============== Residual evaluation ==============

def evaluate_residuals(states: torch.Tensor, params: torch.Tensor, problem: ResidualProblem,
                       tf_config: TestBatchConfig, rng: np.random.Generator,
                       bc: Optional[BoundaryCondition] = None) -> Dict[str, torch.Tensor]:
    """Per-sample weak, strong and (optionally) boundary residuals."""
    tfs = sample_test_functions(problem.grid, tf_config, rng)
    with torch.no_grad():
        terms = weak_terms(states, params, problem, tfs)
        out = {"weak": terms.mean(dim=-1), "strong": strong_residual(states, params, problem),
               "per_test": terms.mean(dim=0)}
        if bc is not None and bc != BoundaryCondition.NONE:
            out["boundary"] = boundary_residual(states, bc, problem.grid)
    return out


def residual_table(entries: Dict[str, Tuple[torch.Tensor, torch.Tensor]], problem: ResidualProblem,
                   tf_config: TestBatchConfig, seed: int = 0,
                   bc: Optional[BoundaryCondition] = None) -> pd.DataFrame:
    """Mean and population std of residuals per named (states, params) set; every row sees the same test functions."""
    rows = []
    for name, (states, params) in entries.items():
        res = evaluate_residuals(states, params, problem, tf_config, make_rng(seed), bc)
        row = {"model": name, "n": int(states.shape[0])}
        for key in ("weak", "strong", "boundary"):
            if key in res:
                vals = res[key].cpu().numpy()
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_std"] = float(vals.std(ddof=0))
        rows.append(row)
    return pd.DataFrame(rows)


def _refined_problem(problem: ResidualProblem, factor: int) -> ResidualProblem:
    forcing = problem.forcing
    if forcing is not None:
        forcing = upsample_trilinear(GridField(problem.grid, forcing), factor).values
    return ResidualProblem(problem.kind, problem.grid.refine(factor), forcing, problem.bc,
                           problem.normalizer, problem.stencil)


def superres_evaluate(states: torch.Tensor, params: torch.Tensor, problem: ResidualProblem, factor: int,
                      tf_config: TestBatchConfig, rng: np.random.Generator,
                      bc: Optional[BoundaryCondition] = None) -> ResidualReport:
    """Upsample states and parameters by `factor` and evaluate residuals on the refined grid.

    Test-function scales are given in pixels, so they grow with the factor and
    keep their physical size. factor = 1 evaluates on the original grid.
    """
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"super-resolution factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor > 1:
        fine = _refined_problem(problem, factor)
        states = upsample_trilinear(GridField(problem.grid, states), factor).values
        params = upsample_trilinear(GridField(problem.grid.spatial(), params), factor).values
        tf_config = tf_config.model_copy(update={"sigma_min": tf_config.sigma_min * factor,
                                                 "sigma_max": tf_config.sigma_max * factor})
        problem = fine
    res = evaluate_residuals(states, params, problem, tf_config, rng, bc)
    return ResidualReport(weak=float(res["weak"].mean()), strong=float(res["strong"].mean()),
                          boundary=float(res["boundary"].mean()) if "boundary" in res else 0.0,
                          per_test=None)


# ============== Statistics ==============

def _moment_metrics(gen: torch.Tensor, data: torch.Tensor) -> Tuple[float, float, float]:
    if gen.shape[0] < 2 or data.shape[0] < 2:
        raise ConfigurationError("moment statistics need at least 2 samples per set")
    if gen.shape[1:] != data.shape[1:]:
        raise ConfigurationError("generated and data samples live on different grids")
    mu_g, mu_d = gen.mean(dim=0), data.mean(dim=0)
    sd_g, sd_d = gen.std(dim=0, unbiased=True), data.std(dim=0, unbiased=True)
    s = float((sd_d ** 2).mean())
    if s == 0:
        raise NumericalError("data variance vanished; relative statistics undefined")
    return (float(((mu_g - mu_d) ** 2).mean()) / s, float(((sd_g - sd_d) ** 2).mean()) / s,
            float((sd_g ** 2).mean()) / s)


def stat_report(gen_x: torch.Tensor, data_x: torch.Tensor, gen_alpha: Optional[torch.Tensor] = None,
                data_alpha: Optional[torch.Tensor] = None) -> StatReport:
    """Relative MMSE, SMSE and diversity normalized by the mean data variance."""
    mx, sx, dx = _moment_metrics(gen_x, data_x)
    fields = {"mmse_x": mx, "smse_x": sx, "diversity_x": dx}
    if gen_alpha is not None and data_alpha is not None:
        ma, sa, da = _moment_metrics(gen_alpha, data_alpha)
        fields.update(mmse_alpha=ma, smse_alpha=sa, diversity_alpha=da)
    return StatReport(**fields)


# ============== Export ==============

def export_field_png(values: Union[torch.Tensor, np.ndarray], path: Union[str, Path],
                     vmin: Optional[float] = None, vmax: Optional[float] = None) -> Path:
    """8-bit grayscale PNG of a 2-D field; axis 0 runs down the image."""
    arr = values.detach().cpu().numpy() if torch.is_tensor(values) else np.asarray(values)
    if arr.ndim != 2:
        raise ConfigurationError(f"PNG export needs a 2-D field, got shape {arr.shape}")
    lo = float(arr.min()) if vmin is None else vmin
    hi = float(arr.max()) if vmax is None else vmax
    scaled = np.zeros_like(arr) if hi <= lo else np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((scaled * 255).round().astype(np.uint8)).save(path)
    return path
