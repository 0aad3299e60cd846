"""
Flow matching on the linear (OT) reference path X_t = t X1 + (1 - t) X0.

Noise schedules, drift algebra, time grids, Euler / Euler-Maruyama samplers
and the flow-matching pre-training loop.
"""
import logging
import math
from typing import List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from ..models.schemas import NoiseKind, NoiseSchedule, TimeGrid
from ..networks.architectures import VectorFieldModel
from ..networks.training import DIVERGENCE_FACTOR, TrainingHistory
from ..utils.config import PRETRAIN_PRESETS
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.logging_setup import RunLog, progress_disabled
from ..utils.rng import standard_normal, uniform

logger = logging.getLogger(__name__)

ZERO_SCHEDULE = NoiseSchedule(kind=NoiseKind.ZERO, h=0.0)


# ============== Reference flow ==============

def beta(t: float) -> float:
    return t


def gamma(t: float) -> float:
    return 1.0 - t


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    t = t.reshape(-1, *([1] * (x0.dim() - 1))) if torch.is_tensor(t) and t.dim() > 0 else t
    return t * x1 + (1 - t) * x0


def eta(t: float) -> float:
    """eta_t = (1 - t) / t for the OT path."""
    if t <= 0:
        raise NumericalError(f"eta is undefined at t={t}")
    return (1.0 - t) / t


def sigma(t: float, schedule: NoiseSchedule) -> float:
    if schedule.kind == NoiseKind.ZERO:
        return 0.0
    h = schedule.h
    return math.sqrt(2.0 * (1.0 - t + h) / (t + h))


def drift(v: torch.Tensor, x: torch.Tensor, t: float, schedule: NoiseSchedule) -> torch.Tensor:
    """b = v + sigma^2 / (2 eta_h) (v - x / (t + h)), with t and 1 - t shifted by h in both factors."""
    s = sigma(t, schedule)
    if s == 0.0:
        return v
    h = schedule.h
    eta_h = (1.0 - t + h) / (t + h)
    return v + (s ** 2 / (2.0 * eta_h)) * (v - x / (t + h))


# ============== Time grids ==============

def coarse_nodes(time_steps: int) -> List[float]:
    return np.linspace(0.0, 1.0, time_steps).tolist()


def augment_time_grid(grid: Union[TimeGrid, List[float]], k_sub: Optional[int] = None) -> List[float]:
    """Split the interval m from the end (m = 0 .. K_sub - 1) into K_sub - m equal sub-steps."""
    if isinstance(grid, TimeGrid):
        nodes, k_sub = coarse_nodes(grid.time_steps), grid.k_sub
    else:
        nodes, k_sub = list(grid), k_sub or 0
    if k_sub >= len(nodes):
        raise ConfigurationError(f"K_sub={k_sub} must be smaller than the number of coarse nodes {len(nodes)}")
    out = [nodes[0]]
    n_int = len(nodes) - 1
    for i in range(n_int):
        m = n_int - 1 - i
        pieces = k_sub - m if m < k_sub else 1
        lo, hi = nodes[i], nodes[i + 1]
        out.extend(lo + (hi - lo) * j / pieces for j in range(1, pieces))
        out.append(hi)
    return out


# ============== Integrators ==============

def sde_step(x: torch.Tensor, b: torch.Tensor, sig: float, h_step: float,
             rng: Optional[np.random.Generator] = None, noise: Optional[torch.Tensor] = None,
             step: Optional[int] = None) -> torch.Tensor:
    """Euler-Maruyama: x + h b + sigma sqrt(h) eps; sigma = 0 is plain Euler."""
    if h_step <= 0:
        raise ConfigurationError(f"step size must be positive, got {h_step}")
    out = x + h_step * b
    if sig != 0.0:
        if noise is None:
            noise = standard_normal(rng, x.shape, x.dtype)
        out = out + sig * math.sqrt(h_step) * noise
    if not torch.isfinite(out).all():
        raise NumericalError("non-finite state in SDE step", step=step)
    return out


@torch.no_grad()
def sample_ode(model: nn.Module, x0: torch.Tensor, timegrid: Union[TimeGrid, List[float]]) -> torch.Tensor:
    """Deterministic Euler rollout over the coarse grid, in model space."""
    nodes = coarse_nodes(timegrid.time_steps) if isinstance(timegrid, TimeGrid) else list(timegrid)
    x = x0
    for k in range(len(nodes) - 1):
        t, dt = nodes[k], nodes[k + 1] - nodes[k]
        x = x + dt * model(x, t)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite state in ODE sampler", step=k)
    return x


@torch.no_grad()
def sample_sde(model: nn.Module, x0: torch.Tensor, nodes: List[float], schedule: NoiseSchedule,
               rng: np.random.Generator) -> torch.Tensor:
    x = x0
    for k in range(len(nodes) - 1):
        t, dt = nodes[k], nodes[k + 1] - nodes[k]
        x = sde_step(x, drift(model(x, t), x, t, schedule), sigma(t, schedule), dt, rng, step=k)
    return x


def sample_base(model: VectorFieldModel, n: int, rng: np.random.Generator, time_steps: int,
                batch_size: int = 32) -> torch.Tensor:
    """n physical-unit samples from the base model with sigma = 0."""
    out = []
    for s in range(0, n, batch_size):
        b = min(batch_size, n - s)
        x0 = standard_normal(rng, (b, *model.dims))
        out.append(model.destandardize(sample_ode(model, x0, TimeGrid(time_steps=time_steps))))
    return torch.cat(out)


# ============== Pre-training ==============

def fm_loss(model: nn.Module, x1: torch.Tensor, x0: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    xt = interpolate(x0, x1, t)
    return ((model(xt, t) - (x1 - x0)) ** 2).mean()


def fm_pretrain(model: VectorFieldModel, data: torch.Tensor, rng: np.random.Generator,
                epochs: Optional[int] = None, learning_rate: Optional[float] = None,
                batch_size: Optional[int] = None, lr_halving_epochs: Optional[int] = None,
                run_log: Optional[RunLog] = None, quiet: bool = False) -> TrainingHistory:
    """Fit the base velocity on standardized data; the standardization is stored on the model."""
    preset = PRETRAIN_PRESETS["base"]
    epochs = preset["epochs"] if epochs is None else epochs
    learning_rate = learning_rate or preset["learning_rate"]
    batch_size = batch_size or preset["batch_size"]
    lr_halving_epochs = lr_halving_epochs or preset["lr_halving_epochs"]
    if data.shape[0] == 0:
        raise ConfigurationError("flow-matching pre-training needs data")

    data = data.to(torch.float64)
    std = float(data.std()) if data.numel() > 1 else 1.0
    model.set_standardization(float(data.mean()), std if std > 0 else 1.0)
    x1_all = model.standardize(data)
    n = x1_all.shape[0]

    history = TrainingHistory()
    with torch.no_grad():
        b = min(batch_size, n)
        history.initial_loss = float(fm_loss(model, x1_all[:b], standard_normal(rng, x1_all[:b].shape),
                                             uniform(rng, (b,))))
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=lr_halving_epochs, gamma=0.5)
    for epoch in tqdm(range(epochs), desc="fm pretrain", disable=progress_disabled(quiet)):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for s in range(0, n, batch_size):
            x1 = x1_all[order[s:s + batch_size]]
            x0 = standard_normal(rng, x1.shape)
            t = uniform(rng, (x1.shape[0],))
            optimizer.zero_grad()
            loss = fm_loss(model, x1, x0, t)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite flow-matching loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += float(loss) * x1.shape[0]
        scheduler.step()
        mean = total / n
        history.epoch_losses.append(mean)
        if run_log is not None:
            run_log.write(stage="fm", epoch=epoch, loss=mean, lr=scheduler.get_last_lr()[0])
        if mean > DIVERGENCE_FACTOR * history.initial_loss:
            raise NumericalError(f"flow-matching pre-training diverged at epoch {epoch}")
    logger.info("base model trained: FM loss %.3e -> %.3e", history.initial_loss, history.final_loss)
    return history
