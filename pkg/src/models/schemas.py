"""
Data models for the physics-constrained flow toolkit.
Configuration objects and reports shared across the physics, generative and store layers.
"""
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..utils.errors import config_error_from


class BoundaryCondition(str, Enum):
    """Boundary tags carried by grid fields."""
    DIRICHLET_ZERO = "dirichlet_zero"
    DIRICHLET_TOP_SIN = "dirichlet_top_sin"
    NEUMANN_REFLECTIVE = "neumann_reflective"
    NONE = "none"


class ProblemKind(str, Enum):
    DARCY = "darcy"
    ACOUSTIC = "acoustic"


class NoiseKind(str, Enum):
    ZERO = "zero"
    MEMORYLESS = "memoryless"


class ArtifactRole(str, Enum):
    """Role of a file registered in the manifest."""
    STATE = "state"
    PARAM = "param"
    CHECKPOINT = "checkpoint"
    LOG = "log"
    REPORT = "report"


class NormalizerMode(str, Enum):
    WEIGHTED = "weighted"  # integral of alpha times the plain Wendland factor
    BOX = "box"            # integral of alpha over the support box


class StrongStencil(str, Enum):
    COMPACT = "compact"
    CENTRAL = "central"


M = TypeVar("M", bound=BaseModel)


def validated(model_cls: Type[M], **kwargs: Any) -> M:
    """Construct a model, converting validation failures into ConfigurationError."""
    try:
        return model_cls(**kwargs)
    except ValidationError as e:
        raise config_error_from(e) from e


# ============== Physics configuration ==============

class GrfConfig(BaseModel):
    """Karhunen-Loeve Gaussian random field settings."""
    model_config = ConfigDict(frozen=True)

    smoothness_exponent: float = Field(default=2.0, gt=1.0)
    correlation_length: float = Field(default=3.0, gt=0.0)
    modes: int = Field(default=32, ge=1, description="KL truncation per axis")


class DatasetSpec(BaseModel):
    """What generate_dataset produces."""
    problem: str = Field(..., description="Key of PROBLEM_PRESETS")
    size: int = Field(default=33, ge=3, description="Spatial nodes per axis")
    n_samples: int = Field(..., ge=1)
    noise_sigma: Optional[float] = Field(default=None, ge=0.0,
                                         description="None: preset rule; 0: clean")
    seed: int = 0
    frames: Optional[int] = Field(default=None, ge=2)
    grf: Optional[GrfConfig] = None

    @model_validator(mode="after")
    def _known_problem(self):
        from ..utils.config import PROBLEM_PRESETS
        if self.problem not in PROBLEM_PRESETS:
            raise ValueError(f"unknown problem '{self.problem}'")
        return self


class TestBatchConfig(BaseModel):
    """Randomized test-function batch. Length scales are in pixel units."""
    model_config = ConfigDict(frozen=True)
    __test__ = False

    n_test: Optional[int] = Field(default=None, ge=1, description="None: one per grid node")
    sigma_min: float = Field(default=1.0, gt=0.0)
    sigma_max: float = Field(default=4.0, gt=0.0)
    wavelet_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    per_node: bool = True
    jitter: float = Field(default=0.5, ge=0.0, description="Center offset in pixels")

    @model_validator(mode="after")
    def _ordered(self):
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max")
        return self


# ============== Generative configuration ==============

class NoiseSchedule(BaseModel):
    """Zero or memoryless diffusion coefficient with noise floor h."""
    model_config = ConfigDict(frozen=True)

    kind: NoiseKind = NoiseKind.MEMORYLESS
    h: float = Field(default=1.0 / 64, ge=0.0)

    @model_validator(mode="after")
    def _floor(self):
        if self.kind == NoiseKind.MEMORYLESS and self.h <= 0:
            raise ValueError("memoryless schedule needs h > 0")
        return self


class TimeGrid(BaseModel):
    """Uniform coarse grid of `time_steps` nodes with optional tail refinement."""
    model_config = ConfigDict(frozen=True)

    time_steps: int = Field(default=64, ge=2)
    k_sub: int = Field(default=0, ge=0)


class FinetuneConfig(BaseModel):
    """Joint-evolution adjoint matching hyperparameters."""
    lambda_x: float = Field(default=1.0, ge=0.0)
    lambda_alpha: Optional[float] = Field(default=None, ge=0.0, description="None: equal to lambda_x")
    lambda_f: float = Field(default=0.0, ge=0.0)
    h: Optional[float] = Field(default=None, gt=0.0, description="None: coarse step size")
    time_steps: int = Field(default=64, ge=2)
    k_sub: int = Field(default=0, ge=0)
    k: int = Field(default=8, ge=0, description="Sampled earlier loss steps")
    k_last: float = Field(default=0.25, ge=0.0, le=1.0)
    lct_factor: float = Field(default=1.6, gt=0.0)
    batch_size: int = Field(default=4, ge=1)
    epochs: int = Field(default=10, ge=0)
    learning_rate: float = Field(default=2e-5, gt=0.0)
    test_batch: TestBatchConfig = Field(default_factory=TestBatchConfig)
    problem: ProblemKind = ProblemKind.DARCY
    boundary_weight: float = Field(default=0.0, ge=0.0)
    boundary_target: BoundaryCondition = BoundaryCondition.DIRICHLET_ZERO
    normalizer: NormalizerMode = NormalizerMode.WEIGHTED
    shared_noise: bool = False
    running_cost_in_loss: bool = False
    checkpoint_every: int = Field(default=0, ge=0)
    seed: int = 0

    @property
    def lam_alpha(self) -> float:
        return self.lambda_x if self.lambda_alpha is None else self.lambda_alpha

    @property
    def noise_floor(self) -> float:
        return self.h if self.h is not None else 1.0 / (self.time_steps - 1)

    @property
    def lct_x(self) -> float:
        return self.lct_factor * self.lambda_x ** 2

    @property
    def lct_alpha(self) -> float:
        return self.lct_factor * self.lam_alpha ** 2

    @property
    def timegrid(self) -> TimeGrid:
        return TimeGrid(time_steps=self.time_steps, k_sub=self.k_sub)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(kind=NoiseKind.MEMORYLESS, h=self.noise_floor)


class GuidanceConfig(BaseModel):
    """Inference-time steering toward sparse parameter observations."""
    zeta: float = Field(..., ge=0.0, description="Conditioning strength")
    time_steps: int = Field(default=64, ge=2)
    schedule: NoiseSchedule = Field(default_factory=lambda: NoiseSchedule(kind=NoiseKind.ZERO, h=0.0))


class SparseObservations(BaseModel):
    """Parameter values observed at grid node indices."""
    indices: List[Tuple[int, ...]] = Field(..., min_length=1)
    values: List[float] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _aligned(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        return self

    @property
    def count(self) -> int:
        return len(self.values)


# ============== Reports ==============

class ResidualReport(BaseModel):
    weak: float = Field(..., ge=0.0)
    strong: float = Field(default=0.0, ge=0.0)
    boundary: float = Field(default=0.0, ge=0.0)
    per_test: Optional[List[float]] = None


class StatReport(BaseModel):
    """Moment metrics normalized by the mean data variance."""
    mmse_x: float = Field(..., ge=0.0)
    smse_x: float = Field(..., ge=0.0)
    diversity_x: float = Field(..., ge=0.0)
    mmse_alpha: Optional[float] = Field(default=None, ge=0.0)
    smse_alpha: Optional[float] = Field(default=None, ge=0.0)
    diversity_alpha: Optional[float] = Field(default=None, ge=0.0)


# ============== Store ==============

class ManifestEntry(BaseModel):
    """One artifact on disk."""
    name: str = Field(..., min_length=1)
    path: str
    role: ArtifactRole
    seed: Optional[int] = None
    problem_kind: Optional[str] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    created_at: datetime = Field(default_factory=datetime.now)
