"""
Ground-truth solvers: steady Darcy flow and the acoustic wave equation.

Darcy: -div(a grad u) = f on the unit square, five-point stencil with harmonic
face averaging, Dirichlet values on the boundary ring, CG with a Jacobi
preconditioner over the interior unknowns.

Acoustic: p_tt = c^2 lap p with reflective walls, leapfrog in time.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from scipy.sparse.linalg import LinearOperator, cg

from ..models.schemas import BoundaryCondition
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.rng import standard_normal
from .grid import Grid, GridField, make_grid

logger = logging.getLogger(__name__)

CG_TOLERANCE = 1e-10
CFL_LIMIT = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class DarcyProblem:
    permeability: GridField
    forcing: Optional[GridField] = None  # None means f == 1
    bc: BoundaryCondition = BoundaryCondition.DIRICHLET_ZERO

    def __post_init__(self):
        if (self.permeability.values <= 0).any():
            raise ConfigurationError("permeability must be strictly positive")
        if self.bc not in (BoundaryCondition.DIRICHLET_ZERO, BoundaryCondition.DIRICHLET_TOP_SIN):
            raise ConfigurationError(f"Darcy solver supports Dirichlet data only, got {self.bc.value}")

    def forcing_values(self) -> torch.Tensor:
        if self.forcing is None:
            return torch.ones(self.permeability.grid.dims, dtype=self.permeability.values.dtype)
        return self.forcing.values


@dataclass(frozen=True)
class AcousticProblem:
    speed: GridField
    initial: GridField
    dt: float = 1e-3
    frames: int = 64
    horizon: float = 0.315

    def __post_init__(self):
        if (self.speed.values <= 0).any():
            raise ConfigurationError("sound speed must be strictly positive")
        if self.frames < 2:
            raise ConfigurationError("at least two frames are recorded")
        if self.record_stride < 1:
            raise ConfigurationError("horizon too short for the requested frame count")

    @property
    def record_stride(self) -> int:
        return int(round(self.horizon / (self.dt * (self.frames - 1))))

    @property
    def recorded_horizon(self) -> float:
        return self.record_stride * self.dt * (self.frames - 1)

    @property
    def cfl(self) -> float:
        h = min(self.speed.grid.spacing)
        return float(self.speed.values.max()) * self.dt / h


def dirichlet_values(grid: Grid, bc: BoundaryCondition, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Full-grid array carrying the Dirichlet data on the boundary ring (zero inside)."""
    g = torch.zeros(grid.spatial_dims, dtype=dtype)
    if bc == BoundaryCondition.DIRICHLET_TOP_SIN:
        xi1 = grid.spatial().axis(0, dtype)
        g[:, -1] = torch.sin(math.pi * xi1)
    return g


def harmonic_faces(a: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Face coefficients 2 a_i a_j / (a_i + a_j) along axis -2 and axis -1."""
    f1 = 2 * a[..., 1:, :] * a[..., :-1, :] / (a[..., 1:, :] + a[..., :-1, :])
    f2 = 2 * a[..., :, 1:] * a[..., :, :-1] / (a[..., :, 1:] + a[..., :, :-1])
    return f1, f2


def darcy_operator(u: torch.Tensor, a: torch.Tensor, grid: Grid) -> torch.Tensor:
    """-div(a grad u) on interior nodes with the solver's own stencil.

    Differentiable in both u and a; returns shape (..., n1-2, n2-2).
    """
    h1, h2 = grid.spacing[-2:]
    f1, f2 = harmonic_faces(a)
    flux1 = f1 * (u[..., 1:, :] - u[..., :-1, :]) / h1
    flux2 = f2 * (u[..., :, 1:] - u[..., :, :-1]) / h2
    div1 = (flux1[..., 1:, 1:-1] - flux1[..., :-1, 1:-1]) / h1
    div2 = (flux2[..., 1:-1, 1:] - flux2[..., 1:-1, :-1]) / h2
    return -(div1 + div2)


def _assemble(a: np.ndarray, h1: float, h2: float) -> Tuple[sp.csr_matrix, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    af1 = 2 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :])
    af2 = 2 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1])
    west = af1[:-1, 1:-1] / h1 ** 2   # face between i-1 and i, for interior i
    east = af1[1:, 1:-1] / h1 ** 2
    south = af2[1:-1, :-1] / h2 ** 2
    north = af2[1:-1, 1:] / h2 ** 2
    m1, m2 = west.shape
    idx = np.arange(m1 * m2).reshape(m1, m2)
    diag = (west + east + south + north).ravel()
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag]
    # couplings between interior neighbours, both directions
    for (r, c, v) in ((idx[:-1, :], idx[1:, :], east[:-1, :]),
                      (idx[:, :-1], idx[:, 1:], north[:, :-1])):
        rows += [r.ravel(), c.ravel()]
        cols += [c.ravel(), r.ravel()]
        vals += [-v.ravel(), -v.ravel()]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m1 * m2, m1 * m2))
    return A, west, east, south, north


def solve_darcy(problem: DarcyProblem, sample: Optional[int] = None) -> GridField:
    """Discrete solution of -div(a grad u) = f with Dirichlet data imposed on the boundary ring."""
    grid = problem.permeability.grid
    if grid.temporal or grid.ndim != 2:
        raise ConfigurationError("Darcy problems live on 2-D spatial grids")
    if problem.permeability.batch_shape:
        raise ConfigurationError("solve_darcy takes one permeability field at a time")
    h1, h2 = grid.spacing
    a = problem.permeability.values.detach().cpu().numpy().astype(np.float64)
    f = problem.forcing_values().detach().cpu().numpy().astype(np.float64)
    g = dirichlet_values(grid, problem.bc).numpy()

    A, west, east, south, north = _assemble(a, h1, h2)
    rhs = f[1:-1, 1:-1].copy()
    rhs[0, :] += west[0, :] * g[0, 1:-1]
    rhs[-1, :] += east[-1, :] * g[-1, 1:-1]
    rhs[:, 0] += south[:, 0] * g[1:-1, 0]
    rhs[:, -1] += north[:, -1] * g[1:-1, -1]

    inv_diag = 1.0 / A.diagonal()
    jacobi = LinearOperator(A.shape, matvec=lambda r: inv_diag * r)
    b = rhs.ravel()
    sol, info = cg(A, b, rtol=CG_TOLERANCE, atol=0.0, M=jacobi, maxiter=20 * b.size)
    if info != 0:
        raise NumericalError(f"CG did not converge (info={info})", sample=sample)

    u = g.copy()
    u[1:-1, 1:-1] = sol.reshape(rhs.shape)
    return GridField(grid, torch.from_numpy(u), problem.bc)


def reflect_laplacian(p: torch.Tensor, h1: float, h2: float) -> torch.Tensor:
    """Five-point Laplacian over the last two axes with mirror ghost nodes."""
    lead = p.shape[:-2]
    q = F.pad(p.reshape(-1, 1, *p.shape[-2:]), (1, 1, 1, 1), mode="reflect").reshape(*lead, p.shape[-2] + 2, p.shape[-1] + 2)
    lap = ((q[..., 2:, 1:-1] - 2 * q[..., 1:-1, 1:-1] + q[..., :-2, 1:-1]) / h1 ** 2
           + (q[..., 1:-1, 2:] - 2 * q[..., 1:-1, 1:-1] + q[..., 1:-1, :-2]) / h2 ** 2)
    return lap


def simulate_acoustic(problem: AcousticProblem, sample: Optional[int] = None) -> GridField:
    """Leapfrog integration from rest; returns a (frames, n1, n2) space-time field."""
    if problem.cfl > CFL_LIMIT:
        raise ConfigurationError(f"CFL number {problem.cfl:.3f} exceeds {CFL_LIMIT:.3f}")
    sgrid = problem.speed.grid
    h1, h2 = sgrid.spacing
    dt = problem.dt
    c2dt2 = (problem.speed.values * dt) ** 2
    stride = problem.record_stride

    p_prev = problem.initial.values.to(torch.float64)
    # zero initial velocity: half-step Taylor start
    p_curr = p_prev + 0.5 * c2dt2 * reflect_laplacian(p_prev, h1, h2)
    frames = [p_prev]
    if stride == 1:
        frames.append(p_curr)
    n_steps = stride * (problem.frames - 1)
    for step in range(2, n_steps + 1):
        p_next = 2 * p_curr - p_prev + c2dt2 * reflect_laplacian(p_curr, h1, h2)
        p_prev, p_curr = p_curr, p_next
        if step % stride == 0:
            if not torch.isfinite(p_curr).all():
                raise NumericalError("acoustic simulation produced non-finite pressure", step=step, sample=sample)
            frames.append(p_curr)
    grid = make_grid((problem.frames, *sgrid.dims),
                     [(0.0, problem.recorded_horizon), *zip(sgrid.lower, sgrid.upper)], temporal=True)
    return GridField(grid, torch.stack(frames, dim=-3), BoundaryCondition.NEUMANN_REFLECTIVE)


def gaussian_bumps(grid: Grid, centers: Optional[Sequence[Tuple[float, float]]] = None,
                   variance: float = 1e-2) -> GridField:
    """Sum of isotropic Gaussians, by default at (i/3, j/3) for i, j in {1, 2}."""
    if variance <= 0:
        raise ConfigurationError("bump variance must be positive")
    if centers is None:
        centers = [(i / 3, j / 3) for i in (1, 2) for j in (1, 2)]
    sgrid = grid.spatial()
    x1, x2 = sgrid.coords()
    values = torch.zeros(sgrid.dims, dtype=torch.float64)
    for c1, c2 in centers:
        values = values + torch.exp(-((x1 - c1) ** 2 + (x2 - c2) ** 2) / (2 * variance))
    return GridField(sgrid, values)


def add_observation_noise(field: GridField, sigma: float, rng: np.random.Generator) -> GridField:
    """i.i.d. Gaussian noise at every node."""
    if sigma < 0:
        raise ConfigurationError("noise sigma must be non-negative")
    if sigma == 0:
        return field
    noise = standard_normal(rng, field.values.shape, dtype=field.values.dtype)
    return field.with_values(field.values + sigma * noise)


def _trapezoid_1d(n: int, h: float, dtype: torch.dtype) -> torch.Tensor:
    w = torch.full((n,), h, dtype=dtype)
    w[0] = w[-1] = 0.5 * h
    return w


def acoustic_energy(p: GridField, speed: torch.Tensor) -> torch.Tensor:
    """Discrete energy 1/2 sum((p_t)^2 + c^2 |grad p|^2) per recorded interval midpoint.

    Node sums carry trapezoid weights and face sums the trapezoid weight of the
    transverse axis: the inner product in which the reflective stencil is symmetric.
    """
    grid = p.grid
    dt = grid.spacing[0]
    n1, n2 = grid.dims[-2:]
    h1, h2 = grid.spacing[-2:]
    dtype = p.values.dtype
    w1, w2 = _trapezoid_1d(n1, h1, dtype), _trapezoid_1d(n2, h2, dtype)
    v = p.values
    pt = (v[..., 1:, :, :] - v[..., :-1, :, :]) / dt
    mid = 0.5 * (v[..., 1:, :, :] + v[..., :-1, :, :])
    g1 = (mid[..., 1:, :] - mid[..., :-1, :]) / h1
    g2 = (mid[..., :, 1:] - mid[..., :, :-1]) / h2
    c2 = speed.to(dtype) ** 2
    c2_1 = 0.5 * (c2[1:, :] + c2[:-1, :])
    c2_2 = 0.5 * (c2[:, 1:] + c2[:, :-1])
    kinetic = (w1[:, None] * w2[None, :] * pt ** 2).sum(dim=(-2, -1))
    potential = ((h1 * w2[None, :] * c2_1 * g1 ** 2).sum(dim=(-2, -1))
                 + (w1[:, None] * h2 * c2_2 * g2 ** 2).sum(dim=(-2, -1)))
    return 0.5 * (kinetic + potential)
