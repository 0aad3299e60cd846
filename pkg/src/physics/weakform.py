"""
Weak-form reward engine.

Test functions are anisotropic Wendland C2 bumps with an optional wavelet
factor, multiplied per axis by a bridge mollifier so they vanish on the
domain boundary. Inner products use trapezoidal quadrature on the node grid,
restricted to a patch around each test function's support and batched over
test functions in chunks.

Everything is written in torch so gradients of the discrete functionals
with respect to state and parameter nodes come from autograd.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..models.schemas import (BoundaryCondition, NormalizerMode, ProblemKind, StrongStencil,
                              TestBatchConfig)
from ..utils.config import get_settings
from ..utils.errors import ConfigurationError, DegenerateParameterError
from .grid import Grid, GridField, boundary_normal_gradient, boundary_values
from .pde import darcy_operator, dirichlet_values, reflect_laplacian

logger = logging.getLogger(__name__)

WAVELET_CONSTANT = 64.0

FieldLike = Union[GridField, torch.Tensor]


def _values(x: FieldLike) -> torch.Tensor:
    return x.values if isinstance(x, GridField) else x


# ============== Test functions ==============

@dataclass(frozen=True)
class TestFunction:
    """One test function; center and scales in physical units."""
    __test__ = False

    center: Tuple[float, ...]
    scales: Tuple[float, ...]
    wavelet: bool = False

    def __post_init__(self):
        if any(s <= 0 for s in self.scales):
            raise ConfigurationError("test-function scales must be positive")
        if len(self.center) != len(self.scales):
            raise ConfigurationError("center and scales differ in length")


@dataclass
class TestFunctionBatch:
    """Struct-of-arrays view of many test functions."""
    __test__ = False

    centers: torch.Tensor   # (N, d)
    scales: torch.Tensor    # (N, d)
    wavelet: torch.Tensor   # (N,) bool

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, item) -> "TestFunctionBatch":
        if isinstance(item, int):
            item = slice(item, item + 1)
        return TestFunctionBatch(self.centers[item], self.scales[item], self.wavelet[item])

    @classmethod
    def from_functions(cls, tfs: Sequence[TestFunction]) -> "TestFunctionBatch":
        if not tfs:
            raise ConfigurationError("at least one test function is required")
        return cls(torch.tensor([tf.center for tf in tfs], dtype=torch.float64),
                   torch.tensor([tf.scales for tf in tfs], dtype=torch.float64),
                   torch.tensor([tf.wavelet for tf in tfs], dtype=torch.bool))

    def to_functions(self) -> List[TestFunction]:
        return [TestFunction(tuple(c.tolist()), tuple(s.tolist()), bool(w))
                for c, s, w in zip(self.centers, self.scales, self.wavelet)]


def as_batch(tfs: Union[TestFunctionBatch, TestFunction, Sequence[TestFunction]]) -> TestFunctionBatch:
    if isinstance(tfs, TestFunctionBatch):
        return tfs
    if isinstance(tfs, TestFunction):
        return TestFunctionBatch.from_functions([tfs])
    return TestFunctionBatch.from_functions(list(tfs))


def wendland(r: torch.Tensor) -> torch.Tensor:
    return (1 - r).clamp(min=0) ** 4 * (4 * r + 1)


def wavelet_factor(r: torch.Tensor, b: Union[bool, torch.Tensor]) -> torch.Tensor:
    b = torch.as_tensor(b, dtype=r.dtype)
    return 1 - WAVELET_CONSTANT * b * r ** 4


def bridge_mollifier(xi: torch.Tensor, lo: float, hi: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """m(xi) = (xi - lo)(hi - xi) / (hi - lo)^2 and its derivative."""
    span2 = (hi - lo) ** 2
    return (xi - lo) * (hi - xi) / span2, (hi + lo - 2 * xi) / span2


@dataclass
class PatchEvaluation:
    """Test functions evaluated on their support patches.

    index[j] holds node indices (N, S_j) of axis j; arrays have shape (N, S_0, ..., S_{d-1}).
    """
    index: List[torch.Tensor]
    psi: torch.Tensor
    grad: List[torch.Tensor]
    plain: torch.Tensor          # unsigned Wendland factor times mollifier
    box: torch.Tensor            # indicator of the axis-aligned support box
    weights: torch.Tensor        # trapezoid weights on the patch

    @property
    def time_derivative(self) -> torch.Tensor:
        return self.grad[0]

    def spatial_gradient(self, temporal: bool) -> List[torch.Tensor]:
        return self.grad[1:] if temporal else self.grad


def _axis_view(t: torch.Tensor, j: int, d: int) -> torch.Tensor:
    """(N, S_j) -> (N, 1, .., S_j, .., 1)."""
    shape = [t.shape[0]] + [1] * d
    shape[1 + j] = t.shape[1]
    return t.reshape(shape)


def evaluate_patches(tfs: TestFunctionBatch, grid: Grid) -> PatchEvaluation:
    """Values, gradients and quadrature weights of a batch of test functions."""
    d = grid.ndim
    if tfs.centers.shape[1] != d:
        raise ConfigurationError(f"test functions have {tfs.centers.shape[1]} axes, grid has {d}")
    spacing = torch.tensor(grid.spacing, dtype=torch.float64)
    lower = torch.tensor(grid.lower, dtype=torch.float64)
    scale_px = tfs.scales / spacing
    center_px = (tfs.centers - lower) / spacing
    index, coords = [], []
    for j in range(d):
        n = grid.dims[j]
        half = int(math.ceil(float(scale_px[:, j].max()))) + 1
        size = min(2 * half + 1, n)
        start = (center_px[:, j].round().long() - half).clamp(min=0, max=n - size)
        idx = start[:, None] + torch.arange(size)[None, :]
        index.append(idx)
        coords.append(lower[j] + idx.to(torch.float64) * spacing[j])

    offsets = [_axis_view((coords[j] - tfs.centers[:, j:j + 1]) / tfs.scales[:, j:j + 1], j, d) for j in range(d)]
    r = torch.sqrt(sum(o ** 2 for o in offsets))
    b = tfs.wavelet.to(torch.float64).reshape([-1] + [1] * d)
    core_w = wendland(r)
    core_v = wavelet_factor(r, b)
    core = core_w * core_v
    # d(core)/dr divided by r, finite at r = 0
    dcore = -20 * (1 - r).clamp(min=0) ** 3 * core_v - 4 * WAVELET_CONSTANT * b * r ** 2 * core_w

    moll, dmoll = [], []
    for j in range(d):
        m, dm = bridge_mollifier(coords[j], grid.lower[j], grid.upper[j])
        moll.append(_axis_view(m, j, d))
        dmoll.append(_axis_view(dm, j, d))
    mprod = moll[0]
    for m in moll[1:]:
        mprod = mprod * m

    psi = core * mprod
    grad = []
    for j in range(d):
        others = dmoll[j]
        for k in range(d):
            if k != j:
                others = others * moll[k]
        scale_j = tfs.scales[:, j].reshape([-1] + [1] * d)
        grad.append(dcore * offsets[j] / scale_j * mprod + core * others)

    w_axes = []
    for j in range(d):
        wj = torch.full((grid.dims[j],), grid.spacing[j], dtype=torch.float64)
        wj[0] = wj[-1] = 0.5 * grid.spacing[j]
        w_axes.append(_axis_view(wj[index[j]], j, d))
    weights = w_axes[0]
    for w in w_axes[1:]:
        weights = weights * w

    inside = torch.ones_like(r, dtype=torch.bool)
    for o in offsets:
        inside = inside & (o.abs() < 1)
    return PatchEvaluation(index, psi, grad, core_w * mprod, inside.to(torch.float64), weights)


def eval_test_function(tf: TestFunction, grid: Grid) -> PatchEvaluation:
    """Single test function on its support patch (batch axis of length one)."""
    return evaluate_patches(as_batch(tf), grid)


def gather_patches(values: torch.Tensor, index: List[torch.Tensor]) -> torch.Tensor:
    """values (B, *dims) -> (B, N, S_0, ..., S_{d-1}) for the given per-axis indices."""
    d = len(index)
    sel = tuple(_axis_view(index[j], j, d) for j in range(d))
    return values[(slice(None),) + sel]


def sample_test_functions(grid: Grid, cfg: TestBatchConfig, rng: np.random.Generator) -> TestFunctionBatch:
    """Draw a batch of test functions.

    Per-node mode places one function at every node with a uniform jitter of
    +-cfg.jitter pixels; otherwise cfg.n_test centers are uniform in the domain.
    Scales are uniform in [sigma_min, sigma_max] pixels per axis. Functions
    whose discrete support holds no interior node are dropped.
    """
    spacing = np.asarray(grid.spacing)
    lower, upper = np.asarray(grid.lower), np.asarray(grid.upper)
    if cfg.per_node and cfg.n_test is None:
        mesh = np.stack(np.meshgrid(*[np.arange(n) for n in grid.dims], indexing="ij"), -1).reshape(-1, grid.ndim)
        jitter = rng.uniform(-cfg.jitter, cfg.jitter, size=mesh.shape)
        centers = lower + (mesh + jitter) * spacing
    else:
        n = cfg.n_test or int(np.prod(grid.dims))
        centers = rng.uniform(lower, upper, size=(n, grid.ndim))
    centers = np.clip(centers, lower, upper)
    n = centers.shape[0]
    scales = rng.uniform(cfg.sigma_min, cfg.sigma_max, size=(n, grid.ndim)) * spacing
    wavelet = rng.uniform(size=n) < cfg.wavelet_prob
    batch = TestFunctionBatch(torch.from_numpy(centers), torch.from_numpy(scales), torch.from_numpy(wavelet))

    keep = []
    chunk = get_settings().TEST_FUNCTION_CHUNK
    for s in range(0, n, chunk):
        ev = evaluate_patches(batch[s:s + chunk], grid)
        keep.append((ev.plain * ev.weights).flatten(1).sum(1) > 0)
    mask = torch.cat(keep)
    if not mask.any():
        raise ConfigurationError("no test function has support on interior nodes")
    return TestFunctionBatch(batch.centers[mask], batch.scales[mask], batch.wavelet[mask])


def node_test_functions(grid: Grid, scale_px: float) -> TestFunctionBatch:
    """One plain test function per node with a fixed pixel scale."""
    coords = torch.stack([c.reshape(-1) for c in grid.coords()], dim=-1)
    scales = torch.tensor(grid.spacing, dtype=torch.float64).expand_as(coords) * scale_px
    return TestFunctionBatch(coords, scales.clone(), torch.zeros(coords.shape[0], dtype=torch.bool))


# ============== Problems ==============

@dataclass(frozen=True)
class ResidualProblem:
    """PDE operator on a state grid; the parameter lives on the spatial grid."""
    kind: ProblemKind
    grid: Grid
    forcing: Optional[torch.Tensor] = None   # Darcy source; None means f == 1
    bc: BoundaryCondition = BoundaryCondition.NONE
    normalizer: NormalizerMode = NormalizerMode.WEIGHTED
    stencil: StrongStencil = StrongStencil.COMPACT
    alpha_floor: float = 1e-3               # lower bound on the normalizer relative to the plain mass

    def __post_init__(self):
        if self.kind == ProblemKind.ACOUSTIC and not self.grid.temporal:
            raise ConfigurationError("acoustic problems need a space-time grid")
        if self.kind == ProblemKind.DARCY and self.grid.temporal:
            raise ConfigurationError("Darcy problems need a spatial grid")

    def forcing_values(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        if self.forcing is None:
            return torch.ones(self.grid.dims, dtype=dtype)
        return self.forcing.to(dtype)


def _batched(state: FieldLike, param: FieldLike, problem: ResidualProblem) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    x, a = _values(state), _values(param)
    nd = problem.grid.ndim
    if tuple(x.shape[-nd:]) != problem.grid.dims:
        raise ConfigurationError(f"state shape {tuple(x.shape)} does not match grid {problem.grid.dims}")
    sdims = problem.grid.spatial_dims
    if tuple(a.shape[-2:]) != sdims:
        raise ConfigurationError(f"parameter shape {tuple(a.shape)} does not match spatial grid {sdims}")
    single = x.dim() == nd
    if single:
        x = x.unsqueeze(0)
    if a.dim() == 2:
        a = a.unsqueeze(0).expand(x.shape[0], -1, -1)
    return x, a, single


def _weak_chunk(x: torch.Tensor, a: torch.Tensor, grads: List[torch.Tensor], problem: ResidualProblem,
                ev: PatchEvaluation) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inner products and normalizers (B, N) for one chunk of test functions."""
    temporal = problem.grid.temporal
    d = problem.grid.ndim
    sdims = tuple(range(2, 2 + d))
    if temporal:
        a_patch = gather_patches(a, ev.index[1:]).unsqueeze(2)   # broadcast over time
    else:
        a_patch = gather_patches(a, ev.index)
    w = ev.weights.unsqueeze(0)
    if problem.kind == ProblemKind.DARCY:
        f_patch = gather_patches(problem.forcing_values(x.dtype).unsqueeze(0), ev.index)
        flux = sum(gather_patches(g, ev.index) * dpsi.unsqueeze(0) for g, dpsi in zip(grads, ev.grad))
        integrand = a_patch * flux - f_patch * ev.psi.unsqueeze(0)
    else:
        pt = gather_patches(grads[0], ev.index)
        lap_part = sum(gather_patches(g, ev.index) * dpsi.unsqueeze(0) for g, dpsi in zip(grads[1:], ev.grad[1:]))
        integrand = -pt * ev.grad[0].unsqueeze(0) + a_patch ** 2 * lap_part
    inner = (w * integrand).sum(dim=sdims)
    mass = ev.plain if problem.normalizer == NormalizerMode.WEIGHTED else ev.box
    weighted = w * mass.unsqueeze(0)
    norm = (weighted * a_patch).sum(dim=sdims)
    floor = problem.alpha_floor * weighted.sum(dim=sdims)
    norm = torch.where(norm > 0, torch.maximum(norm, floor), norm)
    return inner, norm


def weak_inner_and_norm(state: FieldLike, param: FieldLike, problem: ResidualProblem,
                        tfs: Union[TestFunctionBatch, Sequence[TestFunction]]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Raw inner products <L x, psi_i> and alpha-normalizers, shape (B, N) (or (N,) unbatched)."""
    tfs = as_batch(tfs)
    x, a, single = _batched(state, param, problem)
    spacing = problem.grid.spacing
    nd = problem.grid.ndim
    dims = list(range(x.dim() - nd, x.dim()))
    grads = list(torch.gradient(x, spacing=list(spacing), dim=dims, edge_order=2))
    chunk = get_settings().TEST_FUNCTION_CHUNK
    inners, norms = [], []
    for s in range(0, len(tfs), chunk):
        ev = evaluate_patches(tfs[s:s + chunk], problem.grid)
        i, n = _weak_chunk(x, a, grads, problem, ev)
        inners.append(i)
        norms.append(n)
    inner, norm = torch.cat(inners, dim=1), torch.cat(norms, dim=1)
    if single:
        return inner[0], norm[0]
    return inner, norm


def weak_inner_darcy(u: FieldLike, a: FieldLike, f: Optional[torch.Tensor], tf: TestFunction,
                     grid: Optional[Grid] = None) -> torch.Tensor:
    """Quadrature of int a grad u . grad psi - f psi for one test function."""
    grid = grid or u.grid
    problem = ResidualProblem(ProblemKind.DARCY, grid, forcing=f)
    inner, _ = weak_inner_and_norm(u, a, problem, [tf])
    return inner[..., 0]


def weak_inner_acoustic(p: FieldLike, c: FieldLike, tf: TestFunction, grid: Optional[Grid] = None) -> torch.Tensor:
    """Quadrature of int int -p_t psi_t + c^2 grad p . grad psi for one space-time test function."""
    grid = grid or p.grid
    problem = ResidualProblem(ProblemKind.ACOUSTIC, grid)
    inner, _ = weak_inner_and_norm(p, c, problem, [tf])
    return inner[..., 0]


def weak_terms(state: FieldLike, param: FieldLike, problem: ResidualProblem,
               tfs: Union[TestFunctionBatch, Sequence[TestFunction]]) -> torch.Tensor:
    """Normalized squared residual per test function, shape (B, N)."""
    inner, norm = weak_inner_and_norm(state, param, problem, tfs)
    if (norm <= 0).any() or not torch.isfinite(norm).all():
        raise DegenerateParameterError("test-function normalizer of the parameter is not positive")
    return (inner / norm) ** 2


def weak_residual(state: FieldLike, param: FieldLike, problem: ResidualProblem,
                  tfs: Union[TestFunctionBatch, Sequence[TestFunction]]) -> torch.Tensor:
    """R_weak per sample: mean over test functions of (<L x, psi> / int alpha psi)^2."""
    return weak_terms(state, param, problem, tfs).mean(dim=-1)


def grad_weak_residual(state: FieldLike, param: FieldLike, problem: ResidualProblem,
                       tfs: Union[TestFunctionBatch, Sequence[TestFunction]]) -> Tuple[GridField, GridField]:
    """Exact gradients of the discrete R_weak (summed over the batch) w.r.t. state and parameter nodes."""
    x = _values(state).detach().clone().requires_grad_(True)
    a = _values(param).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        value = weak_residual(x, a, problem, tfs).sum()
        gx, ga = torch.autograd.grad(value, (x, a))
    return GridField(problem.grid, gx), GridField(problem.grid.spatial(), ga)


# ============== Strong and boundary residuals ==============

def strong_residual(state: FieldLike, param: FieldLike, problem: ResidualProblem,
                    stencil: Optional[StrongStencil] = None) -> torch.Tensor:
    """Squared L2 norm of the strong-form operator, per sample."""
    x, a, single = _batched(state, param, problem)
    grid = problem.grid
    stencil = stencil or problem.stencil
    if problem.kind == ProblemKind.DARCY:
        h1, h2 = grid.spacing
        f = problem.forcing_values(x.dtype)
        if stencil == StrongStencil.COMPACT:
            r = darcy_operator(x, a, grid) - f[1:-1, 1:-1]
            value = (r ** 2).sum(dim=(-2, -1)) * h1 * h2
        else:
            g1, g2 = torch.gradient(x, spacing=[h1, h2], dim=[-2, -1], edge_order=2)
            (d1,) = torch.gradient(a * g1, spacing=h1, dim=-2, edge_order=2)
            (d2,) = torch.gradient(a * g2, spacing=h2, dim=-1, edge_order=2)
            r = -(d1 + d2) - f
            value = (grid.trapezoid_weights(x.dtype) * r ** 2).sum(dim=(-2, -1))
    else:
        dt = grid.spacing[0]
        h1, h2 = grid.spacing[-2:]
        ptt = (x[:, 2:] - 2 * x[:, 1:-1] + x[:, :-2]) / dt ** 2
        lap = reflect_laplacian(x[:, 1:-1], h1, h2)
        r = ptt - (a ** 2).unsqueeze(1) * lap
        wspace = grid.spatial().trapezoid_weights(x.dtype)
        value = (wspace * r ** 2).sum(dim=(-3, -2, -1)) * dt
    return value[0] if single else value


def boundary_residual(state: FieldLike, bc: BoundaryCondition, grid: Optional[Grid] = None) -> torch.Tensor:
    """Mean squared boundary violation per sample over non-corner boundary nodes (and frames)."""
    grid = grid or state.grid
    x = _values(state)
    if bc == BoundaryCondition.NEUMANN_REFLECTIVE:
        viol = boundary_normal_gradient(GridField(grid, x)) ** 2
    elif bc in (BoundaryCondition.DIRICHLET_ZERO, BoundaryCondition.DIRICHLET_TOP_SIN):
        target = dirichlet_values(grid, bc, x.dtype)
        viol = (boundary_values(x) - boundary_values(target)) ** 2
    else:
        raise ConfigurationError(f"unsupported boundary tag '{bc.value}'")
    lead = x.dim() - grid.ndim
    # average over the boundary index and, for space-time fields, the frame axis
    reduce_dims = tuple(range(lead, viol.dim()))
    return viol.mean(dim=reduce_dims)


def residual_heatmap(state: FieldLike, param: FieldLike, problem: ResidualProblem, fixed_scale: float) -> GridField:
    """Squared normalized inner product of a fixed-scale test function centered at every node."""
    grid = problem.grid
    if fixed_scale <= 0 or fixed_scale * 2 >= max(grid.dims):
        raise ConfigurationError(f"heatmap scale {fixed_scale} px does not fit the grid")
    tfs = node_test_functions(grid, fixed_scale)
    with torch.no_grad():
        inner, norm = weak_inner_and_norm(state, param, problem, tfs)
        safe = torch.where(norm <= 0, torch.ones_like(norm), norm)
        heat = torch.where(norm <= 0, torch.zeros_like(inner), (inner / safe) ** 2)
    return GridField(grid, heat.reshape(*heat.shape[:-1], *grid.dims))


# ============== Terminal cost ==============

class PhysicsReward:
    """Terminal cost g(x, alpha) = R_weak + w_bc * R_BC evaluated in physical units.

    `destandardize` maps model-space states to physical units. Test functions are
    redrawn on every call unless a fixed batch is given.
    """

    def __init__(self, problem: ResidualProblem, tf_config: TestBatchConfig, rng: np.random.Generator,
                 boundary_weight: float = 0.0,
                 boundary_target: BoundaryCondition = BoundaryCondition.DIRICHLET_ZERO,
                 destandardize: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
                 fixed_tests: Optional[TestFunctionBatch] = None):
        self.problem = problem
        self.tf_config = tf_config
        self.rng = rng
        self.boundary_weight = boundary_weight
        self.boundary_target = boundary_target
        self.destandardize = destandardize or (lambda v: v)
        self.fixed_tests = fixed_tests

    def tests(self) -> TestFunctionBatch:
        if self.fixed_tests is not None:
            return self.fixed_tests
        return sample_test_functions(self.problem.grid, self.tf_config, self.rng)

    def __call__(self, x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        phys = self.destandardize(x)
        g = weak_residual(phys, alpha, self.problem, self.tests())
        if self.boundary_weight > 0:
            g = g + self.boundary_weight * boundary_residual(phys, self.boundary_target, self.problem.grid)
        return g

    def terminal_gradient(self, x: torch.Tensor, alpha: torch.Tensor, lambda_x: float,
                          lambda_alpha: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(lambda_x grad_x g, lambda_alpha grad_alpha g, g) with g per sample."""
        x_ = x.detach().clone().requires_grad_(True)
        a_ = alpha.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            g = self(x_, a_)
            gx, ga = torch.autograd.grad(g.sum(), (x_, a_))
        return lambda_x * gx, lambda_alpha * ga, g.detach()
