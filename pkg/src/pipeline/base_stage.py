"""
Stage framework for the training and evaluation pipeline.

Every pipeline step (data generation, pre-training, fine-tuning, sampling,
evaluation, oracles) is a stage that:
1. Reads what it needs from a shared context
2. Records the steps it takes
3. Returns a StageResult instead of raising

The orchestrator chains stages and stops at the first failure.
"""
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from ..utils.errors import PdeFlowError, exit_code_for

logger = logging.getLogger(__name__)


class StageRole(str, Enum):
    """Roles a stage can play in the pipeline."""
    DATA = "data"
    BASE = "base"
    INVERSE = "inverse"
    FINETUNE = "finetune"
    SAMPLE = "sample"
    GUIDE = "guide"
    EVALUATE = "evaluate"
    ORACLE = "oracle"


@dataclass
class StageStep:
    """One recorded step of a stage."""
    observation: str
    action: str
    detail: Dict[str, Any]
    timestamp: datetime = field(default_factory=datetime.now)


@dataclass
class StageResult:
    """Outcome of a stage run."""
    success: bool
    result: Any
    steps: List[StageStep]
    execution_time_ms: int
    error: Optional[str] = None
    exit_code: int = 0


class BaseStage(ABC):
    """
    Abstract base class for pipeline stages.

    Subclasses implement `execute`; `run` adds timing, step tracing and the
    mapping from any raised exception to an exit code.
    """

    def __init__(self, name: str, role: StageRole):
        self.name = name
        self.role = role
        self.step_history: List[StageStep] = []

    def record_step(self, observation: str, action: str, **detail: Any) -> StageStep:
        """Record a step of the stage."""
        step = StageStep(observation=observation, action=action, detail=detail)
        self.step_history.append(step)
        logger.debug("%s: %s -> %s", self.name, observation, action)
        return step

    @abstractmethod
    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        """Do the work; returns outputs merged into the pipeline context."""

    def run(self, context: Dict[str, Any]) -> StageResult:
        start_time = datetime.now()
        self.clear_history()
        try:
            result = self.execute(context)
            error, exit_code, success = None, 0, True
        except PdeFlowError as e:
            logger.error("%s failed: %s", self.name, e)
            result, error, exit_code, success = None, str(e), e.exit_code, False
        except Exception as e:
            logger.exception("%s failed unexpectedly", self.name)
            result, error, exit_code, success = None, f"{type(e).__name__}: {e}", exit_code_for(e), False
        elapsed = int((datetime.now() - start_time).total_seconds() * 1000)
        return StageResult(success=success, result=result, steps=list(self.step_history),
                           execution_time_ms=elapsed, error=error, exit_code=exit_code)

    def format_steps_for_display(self) -> str:
        """Format step history for human-readable display."""
        output = []
        for i, step in enumerate(self.step_history, 1):
            output.append(f"\n--- Step {i} ---")
            output.append(f"Observation: {step.observation}")
            output.append(f"Action: {step.action}")
            if step.detail:
                output.append(f"Detail: {json.dumps(step.detail, indent=2, default=str)}")
        return "\n".join(output)

    def clear_history(self) -> None:
        self.step_history = []


class PipelineOrchestrator:
    """
    Runs stages in order over one shared context.

    Each stage's outputs are merged into the context for the stages after it.
    """

    def __init__(self):
        self.stages: List[BaseStage] = []
        self.execution_log: List[Dict[str, Any]] = []

    def register_stage(self, stage: BaseStage) -> None:
        self.stages.append(stage)

    def run(self, context: Dict[str, Any]) -> StageResult:
        start_time = datetime.now()
        context = dict(context)
        steps: List[StageStep] = []
        self.execution_log = []
        for stage in self.stages:
            outcome = stage.run(context)
            steps.extend(outcome.steps)
            self.execution_log.append({"stage": stage.name, "role": stage.role.value, "success": outcome.success,
                                       "duration_ms": outcome.execution_time_ms, "error": outcome.error})
            if not outcome.success:
                return StageResult(False, context, steps, self._elapsed(start_time),
                                   f"{stage.name}: {outcome.error}", outcome.exit_code)
            context.update(outcome.result or {})
        return StageResult(True, context, steps, self._elapsed(start_time))

    @staticmethod
    def _elapsed(start_time: datetime) -> int:
        return int((datetime.now() - start_time).total_seconds() * 1000)

    def get_execution_summary(self) -> str:
        """Get human-readable summary of execution."""
        lines = ["=== Pipeline Execution Summary ==="]
        for log in self.execution_log:
            lines.append(f"\nStage: {log['stage']}")
            lines.append(f"Status: {'SUCCESS' if log['success'] else 'FAILED'}")
            lines.append(f"Duration: {log['duration_ms']}ms")
            if log["error"]:
                lines.append(f"Error: {log['error']}")
        return "\n".join(lines)
