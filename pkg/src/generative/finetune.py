"""
Adjoint matching on the joint evolution of state x and parameter alpha.

The base dynamics of alpha are not learned: a surrogate flow points from the
current alpha toward phi applied to the one-step estimate of the terminal
state. The fine-tuned model is trained by regressing its control onto
-sigma times the lean adjoint of the base dynamics, solved backward along
trajectories sampled from the fine-tuned model.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from ..models.schemas import FinetuneConfig, NoiseSchedule
from ..networks.architectures import trainable_parameters
from ..physics.grid import Grid
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.logging_setup import RunLog, progress_disabled
from ..utils.rng import standard_normal
from .flow import augment_time_grid, drift, sde_step, sigma

logger = logging.getLogger(__name__)

Pair = Tuple[torch.Tensor, Optional[torch.Tensor]]


# ============== Surrogate parameter flow ==============

def one_step_estimate(x_t: torch.Tensor, v: torch.Tensor, t: float) -> torch.Tensor:
    """x1_hat = x_t + (1 - t) v; at t = 1 this is x_t."""
    return x_t + (1.0 - t) * v


def surrogate_alpha_field(alpha_t: torch.Tensor, alpha_hat: torch.Tensor, t: float, floor: float) -> torch.Tensor:
    """(alpha_hat - alpha_t) / max(1 - t, floor)."""
    return (alpha_hat - alpha_t) / max(1.0 - t, floor)


def reg_field(alpha_ft: torch.Tensor, alpha_hat_base: torch.Tensor, t: float, floor: float) -> torch.Tensor:
    """Direction from the fine-tuned alpha toward the parameter recovered on the base trajectory."""
    return (alpha_hat_base - alpha_ft) / max(1.0 - t, floor)


def running_cost(v_alpha_ft: torch.Tensor, v_reg: torch.Tensor, lambda_f: float,
                 weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """f = lambda_f ||v_alpha_ft - v_reg||^2 per sample, trapezoid quadrature over the parameter grid."""
    sq = (v_alpha_ft - v_reg) ** 2
    if weights is not None:
        sq = sq * weights
    return lambda_f * sq.sum(dim=(-2, -1))


# ============== Joint dynamics ==============

class JointDynamics:
    """Base and fine-tuned velocities on (x, alpha).

    x lives in the base model's standardized space, alpha in physical units.
    Without an inverse predictor the dynamics reduce to x alone.
    """

    def __init__(self, base: nn.Module, ft: nn.Module, schedule: NoiseSchedule, floor: float,
                 phi: Optional[nn.Module] = None, param_grid: Optional[Grid] = None, lambda_f: float = 0.0):
        self.base = base
        self.ft = ft
        self.phi = phi
        self.schedule = schedule
        self.floor = floor
        self.lambda_f = lambda_f
        self.weights = param_grid.trapezoid_weights() if param_grid is not None else None

    @property
    def joint(self) -> bool:
        return self.phi is not None

    def alpha_hat(self, x: torch.Tensor, v_x_base: torch.Tensor, t: float) -> torch.Tensor:
        return self.phi(self.base.destandardize(one_step_estimate(x, v_x_base, t)))

    def base_fields(self, x: torch.Tensor, alpha: Optional[torch.Tensor], t: float):
        """(v_x^base, v_alpha^base, alpha_hat) at a state."""
        v_x = self.base(x, t)
        if not self.joint:
            return v_x, None, None
        a_hat = self.alpha_hat(x, v_x, t)
        return v_x, surrogate_alpha_field(alpha, a_hat, t, self.floor), a_hat

    def base_drift(self, x: torch.Tensor, alpha: Optional[torch.Tensor], t: float) -> Pair:
        v_x, v_a, _ = self.base_fields(x, alpha, t)
        b_a = drift(v_a, alpha, t, self.schedule) if self.joint else None
        return drift(v_x, x, t, self.schedule), b_a

    def ft_velocity(self, x: torch.Tensor, alpha: Optional[torch.Tensor], v_alpha_base: Optional[torch.Tensor],
                    t: float) -> Pair:
        return self.ft(x, alpha, v_alpha_base, t)

    def running_cost_at(self, x: torch.Tensor, alpha: torch.Tensor, alpha_hat_base: torch.Tensor,
                        t: float) -> torch.Tensor:
        _, v_ab, _ = self.base_fields(x, alpha, t)
        _, v_a = self.ft_velocity(x, alpha, v_ab, t)
        return running_cost(v_a, reg_field(alpha, alpha_hat_base, t, self.floor), self.lambda_f, self.weights)

    def running_cost_grad(self, x: torch.Tensor, alpha: torch.Tensor, alpha_hat_base: torch.Tensor,
                          t: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(f, grad_x f, grad_alpha f) with network weights held fixed."""
        xs = x.detach().clone().requires_grad_(True)
        as_ = alpha.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            f = self.running_cost_at(xs, as_, alpha_hat_base.detach(), t)
            gx, ga = torch.autograd.grad(f.sum(), (xs, as_), allow_unused=True)
        gx = torch.zeros_like(x) if gx is None else gx
        ga = torch.zeros_like(alpha) if ga is None else ga
        return f.detach(), gx, ga


# ============== Rollout ==============

@dataclass
class JointTrajectory:
    """Fine-tuned trajectory on the augmented grid; per-step lists have len(nodes) - 1 entries."""
    nodes: List[float]
    x: List[torch.Tensor]
    alpha: List[Optional[torch.Tensor]]
    x_base: List[torch.Tensor]
    sigmas: List[float] = field(default_factory=list)
    v_x_base: List[torch.Tensor] = field(default_factory=list)
    v_alpha_base: List[Optional[torch.Tensor]] = field(default_factory=list)
    alpha_hat_base: List[Optional[torch.Tensor]] = field(default_factory=list)
    b_base: List[Pair] = field(default_factory=list)
    b_ft: List[Pair] = field(default_factory=list)
    u: List[Optional[Pair]] = field(default_factory=list)
    rng_state: Optional[dict] = None

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    def dt(self, k: int) -> float:
        return self.nodes[k + 1] - self.nodes[k]

    @property
    def terminal(self) -> Pair:
        return self.x[-1], self.alpha[-1]


def _noise_like(rng: np.random.Generator, t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    return None if t is None else standard_normal(rng, t.shape, t.dtype)


@torch.no_grad()
def rollout_joint(dyn: JointDynamics, x0: torch.Tensor, alpha0: Optional[torch.Tensor], nodes: List[float],
                  rng: np.random.Generator, shared_noise: bool = False) -> JointTrajectory:
    """Advance the base x-trajectory and the fine-tuned (x, alpha) trajectory side by side."""
    traj = JointTrajectory(nodes=list(nodes), x=[x0], alpha=[alpha0], x_base=[x0],
                           rng_state=dict(rng.bit_generator.state))
    x, alpha, xb = x0, alpha0, x0
    for k in range(len(nodes) - 1):
        t, dt = nodes[k], nodes[k + 1] - nodes[k]
        s = sigma(t, dyn.schedule)

        vb = dyn.base(xb, t)
        a_hat_base = dyn.alpha_hat(xb, vb, t) if dyn.joint else None

        v_xb, v_ab, _ = dyn.base_fields(x, alpha, t)
        v_x, v_a = dyn.ft_velocity(x, alpha, v_ab, t)
        b_base = (drift(v_xb, x, t, dyn.schedule), drift(v_ab, alpha, t, dyn.schedule) if dyn.joint else None)
        b_ft = (drift(v_x, x, t, dyn.schedule), drift(v_a, alpha, t, dyn.schedule) if dyn.joint else None)
        if s > 0:
            u = ((b_ft[0] - b_base[0]) / s, (b_ft[1] - b_base[1]) / s if dyn.joint else None)
        else:
            u = None

        eps_x = _noise_like(rng, x) if s > 0 else None
        eps_a = _noise_like(rng, alpha) if s > 0 else None
        eps_b = eps_x if shared_noise or s == 0 else _noise_like(rng, xb)
        x = sde_step(x, b_ft[0], s, dt, noise=eps_x, step=k)
        if dyn.joint:
            alpha = sde_step(alpha, b_ft[1], s, dt, noise=eps_a, step=k)
        xb = sde_step(xb, drift(vb, xb, t, dyn.schedule), s, dt, noise=eps_b, step=k)

        traj.sigmas.append(s)
        traj.v_x_base.append(v_xb)
        traj.v_alpha_base.append(v_ab)
        traj.alpha_hat_base.append(a_hat_base)
        traj.b_base.append(b_base)
        traj.b_ft.append(b_ft)
        traj.u.append(u)
        traj.x.append(x)
        traj.alpha.append(alpha)
        traj.x_base.append(xb)
    return traj


# ============== Lean adjoint ==============

def solve_lean_adjoint(dyn: JointDynamics, traj: JointTrajectory, terminal: Pair,
                       include_running_cost: bool = True) -> List[Pair]:
    """a_k = a_{k+1} + dt (J_b(x_k)^T a_{k+1} + grad f(x_k)) backward from the terminal gradient.

    J_b is the Jacobian of the base joint drift at the fine-tuned state; products
    with it come from one reverse pass per step. Returns one pair per node.
    """
    a_x, a_a = terminal
    adjoints: List[Pair] = [(a_x, a_a)]
    use_f = include_running_cost and dyn.joint and dyn.lambda_f > 0
    for k in range(traj.steps - 1, -1, -1):
        t, dt = traj.nodes[k], traj.dt(k)
        x = traj.x[k].detach().clone().requires_grad_(True)
        alpha = traj.alpha[k].detach().clone().requires_grad_(True) if dyn.joint else None
        inputs = (x, alpha) if dyn.joint else (x,)
        with torch.enable_grad():
            b_x, b_a = dyn.base_drift(x, alpha, t)
            scalar = (b_x * a_x).sum()
            if dyn.joint:
                scalar = scalar + (b_a * a_a).sum()
            if use_f:
                scalar = scalar + dyn.running_cost_at(x, alpha, traj.alpha_hat_base[k], t).sum()
            grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
        g_x = torch.zeros_like(x) if grads[0] is None else grads[0]
        a_x = a_x + dt * g_x
        if dyn.joint:
            g_a = torch.zeros_like(alpha) if grads[1] is None else grads[1]
            a_a = a_a + dt * g_a
        if not torch.isfinite(a_x).all() or (a_a is not None and not torch.isfinite(a_a).all()):
            raise NumericalError("non-finite lean adjoint", step=k)
        adjoints.append((a_x.detach(), a_a.detach() if a_a is not None else None))
    adjoints.reverse()
    return adjoints


# ============== Loss ==============

def loss_step_subset(n_steps: int, k_last: float, k: int, rng: np.random.Generator) -> List[int]:
    """All steps in the last k_last fraction plus k distinct earlier steps drawn uniformly."""
    tail = min(n_steps, int(math.ceil(k_last * n_steps)))
    early = n_steps - tail
    picked = sorted(rng.choice(early, size=min(k, early), replace=False).tolist()) if early > 0 and k > 0 else []
    subset = picked + list(range(early, n_steps))
    if not subset:
        raise ConfigurationError("loss step subset is empty; raise k_last or k")
    return subset


@dataclass
class LossReport:
    loss: torch.Tensor
    clip_rate: float
    terms: int
    running_cost: float = 0.0


def _node_sum(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).sum(dim=1)


def adjoint_matching_loss(dyn: JointDynamics, traj: JointTrajectory, adjoints: List[Pair], subset: List[int],
                          lct_x: float, lct_alpha: float, running_cost_in_loss: bool = False) -> LossReport:
    """0.5 sum_k (|u_x + sigma a_x|^2 + |u_alpha + sigma a_alpha|^2) dt over the subset.

    Per-sample per-step terms above their clipping threshold are dropped. Gradients
    reach the fine-tuned weights only through the recomputed control.
    """
    if not subset:
        raise ConfigurationError("empty loss step subset")
    total = None
    kept, dropped = 0, 0
    f_total = 0.0
    for k in subset:
        t, dt, s = traj.nodes[k], traj.dt(k), traj.sigmas[k]
        if s <= 0:
            raise ConfigurationError(f"control undefined at step {k}: sigma is zero")
        x, alpha = traj.x[k], traj.alpha[k]
        v_x, v_a = dyn.ft_velocity(x, alpha, traj.v_alpha_base[k], t)
        a_x, a_a = adjoints[k]
        u_x = (drift(v_x, x, t, dyn.schedule) - traj.b_base[k][0]) / s
        term_x = _node_sum((u_x + s * a_x) ** 2)
        step_terms = [(term_x, lct_x)]
        if dyn.joint:
            u_a = (drift(v_a, alpha, t, dyn.schedule) - traj.b_base[k][1]) / s
            step_terms.append((_node_sum((u_a + s * a_a) ** 2), lct_alpha))
        for term, lct in step_terms:
            keep = term.detach() <= lct
            kept += int(keep.sum())
            dropped += int((~keep).sum())
            contrib = 0.5 * dt * torch.where(keep, term, torch.zeros_like(term)).mean()
            total = contrib if total is None else total + contrib
        if running_cost_in_loss and dyn.joint and dyn.lambda_f > 0:
            f = running_cost(v_a, reg_field(alpha, traj.alpha_hat_base[k], t, dyn.floor), dyn.lambda_f, dyn.weights)
            f_total += float(f.mean())
            total = total + dt * f.mean()
    clip_rate = dropped / max(kept + dropped, 1)
    return LossReport(total, clip_rate, kept + dropped, f_total)


# ============== Training loop ==============

@dataclass
class FinetuneHistory:
    losses: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    clip_rates: List[float] = field(default_factory=list)


def finetune(ft: nn.Module, base: nn.Module, reward, config: FinetuneConfig, rng: np.random.Generator,
             phi: Optional[nn.Module] = None, param_grid: Optional[Grid] = None,
             state_dims: Optional[Tuple[int, ...]] = None, run_log: Optional[RunLog] = None,
             on_checkpoint: Optional[Callable[[int, nn.Module], None]] = None, quiet: bool = False) -> FinetuneHistory:
    """Adjoint matching on the joint evolution; `reward` supplies the terminal gradient of g.

    One epoch is one gradient step on a fresh batch of trajectories.
    """
    for module in (base, phi):
        if module is not None:
            module.requires_grad_(False)
    params = trainable_parameters(ft)
    if not params:
        raise ConfigurationError("fine-tune model has no trainable parameters")
    state_dims = tuple(state_dims or ft.dims)
    if phi is not None and param_grid is None:
        raise ConfigurationError("joint fine-tuning needs the parameter grid")

    dyn = JointDynamics(base, ft, config.schedule, config.noise_floor, phi, param_grid, config.lambda_f)
    nodes = augment_time_grid(config.timegrid)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    history = FinetuneHistory()
    logger.info("fine-tuning: %d epochs, %d augmented steps, lambda_x=%g lambda_alpha=%g lambda_f=%g",
                config.epochs, len(nodes) - 1, config.lambda_x, config.lam_alpha, config.lambda_f)

    for epoch in tqdm(range(config.epochs), desc="finetune", disable=progress_disabled(quiet)):
        b = config.batch_size
        x0 = standard_normal(rng, (b, *state_dims))
        alpha0 = standard_normal(rng, (b, *param_grid.dims)) if phi is not None else None
        traj = rollout_joint(dyn, x0, alpha0, nodes, rng, config.shared_noise)

        x1, a1 = traj.terminal
        if dyn.joint:
            gx, ga, g = reward.terminal_gradient(x1, a1, config.lambda_x, config.lam_alpha)
        else:
            gx, g = reward.terminal_gradient(x1, config.lambda_x)
            ga = None
        adjoints = solve_lean_adjoint(dyn, traj, (gx, ga))
        subset = loss_step_subset(traj.steps, config.k_last, config.k, rng)

        optimizer.zero_grad()
        report = adjoint_matching_loss(dyn, traj, adjoints, subset, config.lct_x, config.lct_alpha,
                                       config.running_cost_in_loss)
        if not torch.isfinite(report.loss):
            raise NumericalError(f"non-finite adjoint matching loss at epoch {epoch}")
        report.loss.backward()
        optimizer.step()

        history.losses.append(float(report.loss))
        history.rewards.append(float(g.mean()))
        history.clip_rates.append(report.clip_rate)
        if run_log is not None:
            run_log.write(stage="finetune", epoch=epoch, loss=float(report.loss), terminal_cost=float(g.mean()),
                          clip_rate=report.clip_rate, running_cost=report.running_cost)
        if on_checkpoint is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            on_checkpoint(epoch + 1, ft)
    if history.losses:
        logger.info("fine-tuning done: terminal cost %.3e -> %.3e", history.rewards[0], history.rewards[-1])
    return history


# ============== Linear-reward bench ==============

class LinearReward:
    """g(x) = -c sum(x); its minimizer tilts the terminal law by exp(lambda c x)."""

    def __init__(self, c: float = 1.0):
        self.c = c

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return -self.c * x.reshape(x.shape[0], -1).sum(dim=1)

    def terminal_gradient(self, x: torch.Tensor, lambda_x: float) -> Tuple[torch.Tensor, torch.Tensor]:
        return -lambda_x * self.c * torch.ones_like(x), self(x)


def tilted_gaussian_moments(mu: float, s: float, c: float, lam: float = 1.0) -> Dict[str, float]:
    """Mean and std of N(mu, s^2) reweighted by exp(lam c x)."""
    return {"mean": mu + lam * c * s ** 2, "std": s}
