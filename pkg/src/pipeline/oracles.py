"""
Exact reference benches.

Each bench takes (seed, quick) and returns a flat report with a boolean
"passed". `quick` shrinks grids and sample counts.
"""
import logging
import math
from typing import Any, Callable, Dict

import numpy as np
import torch

from ..generative.finetune import (JointDynamics, LinearReward, finetune, rollout_joint,
                                   tilted_gaussian_moments)
from ..generative.flow import augment_time_grid
from ..models.schemas import BoundaryCondition, FinetuneConfig, NoiseSchedule, ProblemKind, TestBatchConfig
from ..networks.architectures import (AnalyticGaussianFlow, FinetuneModel, GaussianControlModel, InversePredictor,
                                      VectorFieldModel, input_vjp, param_gradient, trainable_parameters)
from ..physics.grid import GridField, make_grid, space_time_grid
from ..physics.pde import AcousticProblem, DarcyProblem, acoustic_energy, simulate_acoustic, solve_darcy
from ..physics.weakform import ResidualProblem, sample_test_functions, weak_residual
from ..utils.rng import make_rng, standard_normal

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
FD_STEP = 1e-6


# ============== Exponential tilting ==============

def gaussian_tilt(seed: int = 0, quick: bool = False, mu: float = 1.0, s: float = 0.5,
                  c: float = 1.0) -> Dict[str, Any]:
    """Fine-tune an exact N(0,1) -> N(mu, s^2) flow toward reward c x and compare with the tilted law."""
    rng = make_rng(seed)
    base = AnalyticGaussianFlow(mu, s)
    ft = GaussianControlModel(base)
    # clipping off: the scalar bench has no residual scale to clip against
    config = FinetuneConfig(lambda_x=1.0, h=1.0 / 64, time_steps=64, k=16, k_last=0.25, lct_factor=1e4,
                            batch_size=64 if quick else 256, epochs=100 if quick else 500,
                            learning_rate=2e-3, seed=seed)
    finetune(ft, base, LinearReward(c), config, rng, state_dims=(1,), quiet=True)

    n = 2000 if quick else 10_000
    dyn = JointDynamics(base, ft, config.schedule, config.noise_floor)
    traj = rollout_joint(dyn, standard_normal(rng, (n, 1)), None, augment_time_grid(config.timegrid), rng)
    x1 = traj.terminal[0]
    expected = tilted_gaussian_moments(mu, s, c)
    mean, std = float(x1.mean()), float(x1.std())
    mean_err = abs(mean - expected["mean"]) / expected["mean"]
    std_err = abs(std - expected["std"]) / expected["std"]
    return {"mean": mean, "std": std, "expected_mean": expected["mean"], "expected_std": expected["std"],
            "mean_rel_error": mean_err, "std_rel_error": std_err,
            "passed": mean_err <= 0.05 and std_err <= 0.15}


# ============== Solver convergence ==============

def _manufactured_error(n: int) -> float:
    grid = make_grid((n, n))
    x, y = grid.coords()
    a = 1.0 + x
    u_star = torch.sin(math.pi * x) * torch.sin(math.pi * y)
    # f = -div((1 + x) grad u*)
    f = 2 * math.pi ** 2 * a * u_star - math.pi * torch.cos(math.pi * x) * torch.sin(math.pi * y)
    u = solve_darcy(DarcyProblem(GridField(grid, a), GridField(grid, f), BoundaryCondition.DIRICHLET_ZERO))
    return float((u.values - u_star).abs().max())


def manufactured_darcy(seed: int = 0, quick: bool = False) -> Dict[str, Any]:
    coarse, fine = (17, 33) if quick else (33, 65)
    e_coarse, e_fine = _manufactured_error(coarse), _manufactured_error(fine)
    ratio = e_coarse / e_fine
    return {"error_coarse": e_coarse, "error_fine": e_fine, "ratio": ratio,
            "passed": abs(ratio - 4.0) <= 0.8}


def acoustic_eigenmode(seed: int = 0, quick: bool = False) -> Dict[str, Any]:
    """cos(pi x) cos(pi y) cos(omega t) with omega = c pi sqrt(2) under reflective boundaries."""
    n = 33 if quick else 65
    speed = 1.0
    sgrid = make_grid((n, n))
    x, y = sgrid.coords()
    mode = torch.cos(math.pi * x) * torch.cos(math.pi * y)
    problem = AcousticProblem(speed=GridField(sgrid, torch.full((n, n), speed, dtype=torch.float64)),
                              initial=GridField(sgrid, mode), dt=1e-3, frames=33, horizon=0.315)
    p = simulate_acoustic(problem)
    t = p.grid.axis(0)
    omega = speed * math.pi * math.sqrt(2.0)
    exact = torch.cos(omega * t)[:, None, None] * mode
    l2_error = float(torch.linalg.norm(p.values - exact) / torch.linalg.norm(exact))
    energy = acoustic_energy(p, problem.speed.values)
    drift = float((energy - energy[0]).abs().max() / energy[0])
    return {"l2_rel_error": l2_error, "energy_drift": drift, "passed": l2_error <= 0.02 and drift <= 0.01}


# ============== Gradient validation ==============

def _rel_error(fd: float, ad: float, floor: float) -> float:
    return abs(fd - ad) / max(abs(ad), abs(fd), floor)


def _fd_worst_error(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, grad: torch.Tensor,
                       n: int, rng: np.random.Generator) -> float:
    """Worst relative error of central differences against `grad` on n random coordinates."""
    floor = 1e-3 * float(grad.abs().max()) + 1e-12
    worst = 0.0
    flat = x.reshape(-1)
    for i in rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += FD_STEP
        minus[i] -= FD_STEP
        fd = (float(fn(plus.reshape(x.shape))) - float(fn(minus.reshape(x.shape)))) / (2 * FD_STEP)
        worst = max(worst, _rel_error(fd, float(grad.reshape(-1)[i]), floor))
    return worst


def _check_weak(problem: ResidualProblem, x: torch.Tensor, a: torch.Tensor, n: int,
                rng: np.random.Generator) -> float:
    tfs = sample_test_functions(problem.grid, TestBatchConfig(n_test=24, per_node=False, sigma_min=1.0,
                                                              sigma_max=2.0), rng)
    xs, as_ = x.clone().requires_grad_(True), a.clone().requires_grad_(True)
    gx, ga = torch.autograd.grad(weak_residual(xs, as_, problem, tfs), (xs, as_))
    with torch.no_grad():
        ex = _fd_worst_error(lambda v: weak_residual(v, a, problem, tfs), x, gx, n // 2, rng)
        ea = _fd_worst_error(lambda v: weak_residual(x, v, problem, tfs), a, ga, n - n // 2, rng)
    return max(ex, ea)


def _small_joint_models(rng: np.random.Generator, dims=(9, 9)):
    torch.manual_seed(int(rng.integers(2 ** 31)))
    base = VectorFieldModel(dims, hidden=4, n_freq=1)
    phi = InversePredictor(dims, (1.0, 12.0), hidden=4, n_freq=1)
    ft = FinetuneModel(base, hidden=4, alpha_scale=6.0)
    with torch.no_grad():
        for p in trainable_parameters(ft):
            p.add_(0.1 * torch.randn_like(p))
    return base, phi, ft


def gradcheck(seed: int = 0, quick: bool = False) -> Dict[str, Any]:
    """Central-difference validation of every gradient facility in double precision."""
    rng = make_rng(seed)
    n = 20 if quick else 100
    report: Dict[str, Any] = {}

    grid = make_grid((9, 9))
    darcy = ResidualProblem(ProblemKind.DARCY, grid)
    u = standard_normal(rng, grid.dims)
    a = 2.0 + torch.from_numpy(rng.uniform(size=grid.dims))
    report["darcy_weak"] = _check_weak(darcy, u, a, n, rng)

    st = space_time_grid(9, 5, 0.04)
    acoustic = ResidualProblem(ProblemKind.ACOUSTIC, st)
    p = standard_normal(rng, st.dims)
    c = 1.0 + torch.from_numpy(rng.uniform(size=st.spatial_dims))
    report["acoustic_weak"] = _check_weak(acoustic, p, c, n, rng)

    base, phi, ft = _small_joint_models(rng)
    schedule = NoiseSchedule(h=1.0 / 16)
    dyn = JointDynamics(base, ft, schedule, 1.0 / 16, phi, grid, lambda_f=0.5)
    x = standard_normal(rng, (1, *grid.dims))
    alpha = 5.0 + standard_normal(rng, (1, *grid.dims))
    a_hat = 5.0 + standard_normal(rng, (1, *grid.dims))
    t = 0.4
    _, gx, ga = dyn.running_cost_grad(x, alpha, a_hat, t)
    with torch.no_grad():
        report["running_cost"] = max(
            _fd_worst_error(lambda v: dyn.running_cost_at(v, alpha, a_hat, t).sum(), x, gx, n // 2, rng),
            _fd_worst_error(lambda v: dyn.running_cost_at(x, v, a_hat, t).sum(), alpha, ga, n - n // 2, rng))

    v_ab = torch.zeros_like(alpha)

    def closure():
        v_x, v_a = ft(x, alpha, v_ab, t)
        return (v_x ** 2).sum() + (v_a ** 2).sum()

    flat = param_gradient(ft, closure)
    params = trainable_parameters(ft)
    floor = 1e-3 * float(flat.abs().max()) + 1e-12
    worst, offset, positions = 0.0, 0, []
    for prm in params:
        positions.extend((prm, j, offset + j) for j in range(prm.numel()))
        offset += prm.numel()
    with torch.no_grad():
        for i in rng.choice(len(positions), size=min(n, len(positions)), replace=False):
            prm, j, k = positions[i]
            view = prm.view(-1)
            orig = float(view[j])
            view[j] = orig + FD_STEP
            plus = float(closure())
            view[j] = orig - FD_STEP
            minus = float(closure())
            view[j] = orig
            worst = max(worst, _rel_error((plus - minus) / (2 * FD_STEP), float(flat[k]), floor))
    report["param_gradient"] = worst

    cot = standard_normal(rng, (1, *grid.dims))
    (vjp,) = input_vjp(lambda v: base(v, t), [x], cot)
    worst = 0.0
    with torch.no_grad():
        for _ in range(max(n // 10, 1)):
            d = standard_normal(rng, x.shape)
            fd = (float((cot * base(x + FD_STEP * d, t)).sum()) - float((cot * base(x - FD_STEP * d, t)).sum())) \
                / (2 * FD_STEP)
            worst = max(worst, _rel_error(fd, float((vjp * d).sum()), 1e-6))
    report["input_vjp"] = worst

    report["passed"] = all(v <= GRADCHECK_TOLERANCE for k, v in report.items() if k != "passed")
    return report


BENCHES: Dict[str, Callable[..., Dict[str, Any]]] = {
    "gaussian-tilt": gaussian_tilt,
    "manufactured-darcy": manufactured_darcy,
    "acoustic-eigenmode": acoustic_eigenmode,
    "gradcheck": gradcheck,
}
