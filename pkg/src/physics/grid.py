"""
Regular node-centered grids, fields on them, finite-difference stencils,
multilinear upsampling and Gaussian random field sampling.

Axis convention: the last two axes are the spatial coordinates (xi_1, xi_2);
a temporal grid carries time on the axis before them. Values may have any
number of leading batch axes.
"""
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

from ..models.schemas import BoundaryCondition, GrfConfig, validated
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.rng import standard_normal


class Grid(BaseModel):
    """Rectangular node grid. Boundary nodes are included."""
    model_config = ConfigDict(frozen=True)

    dims: Tuple[int, ...]
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    temporal: bool = False

    @model_validator(mode="after")
    def _check(self):
        if not (len(self.dims) == len(self.lower) == len(self.upper)):
            raise ValueError("dims and extents must have the same length")
        if self.temporal and len(self.dims) < 2:
            raise ValueError("temporal grid needs a time axis and a spatial axis")
        for j, n in enumerate(self.dims):
            if n < 2:
                raise ValueError(f"axis {j} needs at least 2 points, got {n}")
            if self.upper[j] <= self.lower[j]:
                raise ValueError(f"axis {j}: upper bound must exceed lower bound")
        return self

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for n, lo, hi in zip(self.dims, self.lower, self.upper))

    @property
    def spatial_dims(self) -> Tuple[int, ...]:
        return self.dims[1:] if self.temporal else self.dims

    def spatial(self) -> "Grid":
        if not self.temporal:
            return self
        return Grid(dims=self.dims[1:], lower=self.lower[1:], upper=self.upper[1:])

    def axis(self, j: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.linspace(self.lower[j], self.upper[j], self.dims[j], dtype=dtype)

    def coords(self, dtype: torch.dtype = torch.float64) -> List[torch.Tensor]:
        """Node coordinates per axis, broadcast to the full grid shape."""
        return list(torch.meshgrid(*[self.axis(j, dtype) for j in range(self.ndim)], indexing="ij"))

    def trapezoid_weights(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Tensor-product trapezoidal quadrature weights."""
        w = torch.ones((), dtype=dtype)
        for j, (n, h) in enumerate(zip(self.dims, self.spacing)):
            wj = torch.full((n,), h, dtype=dtype)
            wj[0] = wj[-1] = 0.5 * h
            shape = [1] * self.ndim
            shape[j] = n
            w = w * wj.reshape(shape)
        return w

    @property
    def volume(self) -> float:
        return math.prod(hi - lo for lo, hi in zip(self.lower, self.upper))

    def refine(self, factor: int) -> "Grid":
        return Grid(dims=tuple((n - 1) * factor + 1 for n in self.dims),
                    lower=self.lower, upper=self.upper, temporal=self.temporal)


def make_grid(dims: Sequence[int], extents: Optional[Sequence[Tuple[float, float]]] = None,
              temporal: bool = False) -> Grid:
    """Build a grid; extents default to [0, 1] on every axis."""
    dims = tuple(int(n) for n in dims)
    if extents is None:
        extents = [(0.0, 1.0)] * len(dims)
    if len(extents) != len(dims):
        raise ConfigurationError("one (lower, upper) pair is needed per axis")
    return validated(Grid, dims=dims,
                     lower=tuple(float(e[0]) for e in extents),
                     upper=tuple(float(e[1]) for e in extents),
                     temporal=temporal)


def space_time_grid(size: int, frames: int, horizon: float) -> Grid:
    return make_grid((frames, size, size), [(0.0, horizon), (0.0, 1.0), (0.0, 1.0)], temporal=True)


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on a grid, with optional leading batch axes."""
    grid: Grid
    values: torch.Tensor
    bc: BoundaryCondition = BoundaryCondition.NONE

    def __post_init__(self):
        if tuple(self.values.shape[-self.grid.ndim:]) != self.grid.dims:
            raise ConfigurationError(
                f"field shape {tuple(self.values.shape)} does not end with grid dims {self.grid.dims}")
        if not torch.isfinite(self.values).all():
            raise NumericalError("field contains non-finite values")

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape[:-self.grid.ndim])

    def with_values(self, values: torch.Tensor) -> "GridField":
        return replace(self, values=values)


def central_gradient(field: GridField) -> List[GridField]:
    """Second-order central differences inside, second-order one-sided at edges.

    An axis with only two nodes falls back to first-order differences.
    """
    grid = field.grid
    nd = grid.ndim
    out = []
    for j in range(nd):
        dim = field.values.ndim - nd + j
        edge_order = 2 if grid.dims[j] >= 3 else 1
        (g,) = torch.gradient(field.values, spacing=grid.spacing[j], dim=dim, edge_order=edge_order)
        out.append(field.with_values(g))
    return out


def boundary_normal_gradient(field: GridField) -> torch.Tensor:
    """Outward normal derivative at non-corner boundary nodes.

    Edges are concatenated in the order left (xi_1=0), right (xi_1=1),
    bottom (xi_2=0), top (xi_2=1) along the last axis. Leading axes
    (batch, time frames) are kept.
    """
    n1, n2 = field.grid.dims[-2:]
    if n1 < 3 or n2 < 3:
        raise ConfigurationError("normal gradient needs at least 3 points per spatial axis")
    h1, h2 = field.grid.spacing[-2:]
    v = field.values
    left = -(-3 * v[..., 0, 1:-1] + 4 * v[..., 1, 1:-1] - v[..., 2, 1:-1]) / (2 * h1)
    right = (3 * v[..., -1, 1:-1] - 4 * v[..., -2, 1:-1] + v[..., -3, 1:-1]) / (2 * h1)
    bottom = -(-3 * v[..., 1:-1, 0] + 4 * v[..., 1:-1, 1] - v[..., 1:-1, 2]) / (2 * h2)
    top = (3 * v[..., 1:-1, -1] - 4 * v[..., 1:-1, -2] + v[..., 1:-1, -3]) / (2 * h2)
    return torch.cat([left, right, bottom, top], dim=-1)


def boundary_values(values: torch.Tensor) -> torch.Tensor:
    """Non-corner boundary values in the same edge order as boundary_normal_gradient."""
    return torch.cat([values[..., 0, 1:-1], values[..., -1, 1:-1],
                      values[..., 1:-1, 0], values[..., 1:-1, -1]], dim=-1)


def upsample_trilinear(field: GridField, factor: int) -> GridField:
    """Multilinear interpolation onto a grid refined by an integer factor."""
    if int(factor) != factor or factor < 2:
        raise ConfigurationError(f"upsampling factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    grid = field.grid
    fine = grid.refine(factor)
    if grid.ndim not in (2, 3):
        raise ConfigurationError("upsampling supports 2 or 3 axes")
    mode = "bilinear" if grid.ndim == 2 else "trilinear"
    batch = field.batch_shape
    flat = field.values.reshape(-1, 1, *grid.dims)
    up = F.interpolate(flat, size=fine.dims, mode=mode, align_corners=True)
    return GridField(fine, up.reshape(*batch, *fine.dims), field.bc)


def _cosine_basis(n: int, modes: int, lo: float, hi: float) -> torch.Tensor:
    """Orthonormal Neumann cosine modes on [lo, hi] sampled at n nodes: shape (n, modes)."""
    xi = (torch.linspace(lo, hi, n, dtype=torch.float64) - lo) / (hi - lo)
    k = torch.arange(modes, dtype=torch.float64)
    basis = torch.cos(math.pi * xi[:, None] * k[None, :])
    basis[:, 1:] *= math.sqrt(2.0)
    return basis


def grf_eigenvalues(cfg: GrfConfig) -> torch.Tensor:
    """Scaled KL eigenvalues on the (modes x modes) index set; the constant mode is excluded."""
    k = torch.arange(cfg.modes, dtype=torch.float64)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    tau, alpha = cfg.correlation_length, cfg.smoothness_exponent
    lam = (math.pi ** 2 * k2 + tau ** 2) ** (-alpha)
    # variance-preserving rescale tau^(alpha - d/2), squared
    lam = lam * tau ** (2 * alpha - 2)
    lam[0, 0] = 0.0
    return lam


def sample_grf(grid: Grid, cfg: GrfConfig, rng: np.random.Generator, n: Optional[int] = None) -> GridField:
    """Zero-mean Gaussian random field by direct cosine KL summation.

    The constant mode carries no variance, so every draw has zero trapezoid
    average over the domain. Returns a single field, or a batch of `n` fields
    when n is given.
    """
    sgrid = grid.spatial()
    if sgrid.ndim != 2:
        raise ConfigurationError("GRF sampling is defined on 2-D spatial grids")
    count = 1 if n is None else n
    phi1 = _cosine_basis(sgrid.dims[0], cfg.modes, sgrid.lower[0], sgrid.upper[0])
    phi2 = _cosine_basis(sgrid.dims[1], cfg.modes, sgrid.lower[1], sgrid.upper[1])
    z = standard_normal(rng, (count, cfg.modes, cfg.modes))
    coeff = grf_eigenvalues(cfg).sqrt() * z
    values = torch.einsum("ik,bkl,jl->bij", phi1, coeff, phi2)
    if n is None:
        values = values[0]
    return GridField(sgrid, values)


def grf_pointwise_covariance(grid: Grid, cfg: GrfConfig, p: Tuple[int, int], q: Tuple[int, int]) -> float:
    """Covariance of the truncated series between two nodes."""
    sgrid = grid.spatial()
    phi1 = _cosine_basis(sgrid.dims[0], cfg.modes, sgrid.lower[0], sgrid.upper[0])
    phi2 = _cosine_basis(sgrid.dims[1], cfg.modes, sgrid.lower[1], sgrid.upper[1])
    lam = grf_eigenvalues(cfg)
    a = phi1[p[0]][:, None] * phi2[p[1]][None, :]
    b = phi1[q[0]][:, None] * phi2[q[1]][None, :]
    return float((lam * a * b).sum())


def threshold_binary(field: GridField, lo: float, hi: float) -> GridField:
    """Map raw >= 0 to hi and raw < 0 to lo."""
    if lo >= hi:
        raise ConfigurationError(f"threshold levels must satisfy lo < hi, got {lo}, {hi}")
    values = torch.where(field.values >= 0,
                         torch.tensor(hi, dtype=field.values.dtype),
                         torch.tensor(lo, dtype=field.values.dtype))
    return field.with_values(values)
