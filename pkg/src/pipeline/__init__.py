"""Pipeline stages, orchestration, reference benches and acceptance experiments."""
from .base_stage import BaseStage, PipelineOrchestrator, StageResult, StageRole, StageStep
from .experiments import EXPERIMENTS, ExperimentStage
from .oracles import BENCHES
from .stages import (BasePretrainStage, DataGenerationStage, EvaluationStage, FinetuneStage, GuidanceStage,
                     InversePretrainStage, OracleStage, SamplingStage, build_pipeline)

__all__ = [
    "BaseStage",
    "PipelineOrchestrator",
    "StageResult",
    "StageRole",
    "StageStep",
    "BENCHES",
    "EXPERIMENTS",
    "ExperimentStage",
    "BasePretrainStage",
    "DataGenerationStage",
    "EvaluationStage",
    "FinetuneStage",
    "GuidanceStage",
    "InversePretrainStage",
    "OracleStage",
    "SamplingStage",
    "build_pipeline",
]
