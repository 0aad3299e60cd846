"""Configuration and report models."""

from .schemas import (ArtifactRole, BoundaryCondition, DatasetSpec, FinetuneConfig, GrfConfig, GuidanceConfig,
                      ManifestEntry, NoiseKind, NoiseSchedule, NormalizerMode, ProblemKind, ResidualReport,
                      SparseObservations, StatReport, StrongStencil, TestBatchConfig, TimeGrid, validated)

__all__ = [
    "ArtifactRole",
    "BoundaryCondition",
    "DatasetSpec",
    "FinetuneConfig",
    "GrfConfig",
    "GuidanceConfig",
    "ManifestEntry",
    "NoiseKind",
    "NoiseSchedule",
    "NormalizerMode",
    "ProblemKind",
    "ResidualReport",
    "SparseObservations",
    "StatReport",
    "StrongStencil",
    "TestBatchConfig",
    "TimeGrid",
    "validated",
]
