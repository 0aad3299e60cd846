"""
Desk-scale acceptance experiments.

Each experiment trains through the stage pipeline in a working directory and
compares fine-tuned against base samples. Like the benches in oracles.py an
experiment takes (seed, quick) and returns a flat report with a boolean
"passed"; `quick` shrinks everything to a smoke run whose verdict is not
meaningful.

The criteria themselves are plain functions over evaluation rows so they can
be checked without training anything.
"""
import json
import logging
import math
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence

from ..generative.inference import inference_dynamics, sample_observations, sweep_zeta
from ..store.checkpoints import load_checkpoint
from ..store.datasets import load_dataset
from ..utils.config import FINETUNE_PRESETS
from ..utils.errors import ConfigurationError, NumericalError, PdeFlowError, StoreError
from ..utils.rng import make_rng
from .base_stage import BaseStage, PipelineOrchestrator, StageRole
from .stages import (BasePretrainStage, DataGenerationStage, EvaluationStage, FinetuneStage,
                     InversePretrainStage, dataset_meta, residual_problem)

logger = logging.getLogger(__name__)

RESIDUAL_RATIO = 0.5
DIVERSITY_BAND = 0.15
DIVERSITY_DROP = 0.25
WEAK_SLACK = 0.10
GUIDANCE_RATIO = 0.25
GUIDANCE_ZETAS = (0.1, 0.3, 1.0, 3.0, 10.0)

_FAILURES = {ConfigurationError.exit_code: ConfigurationError, NumericalError.exit_code: NumericalError,
             StoreError.exit_code: StoreError}

SCALES: Dict[bool, Dict[str, Any]] = {
    False: {"size": 33, "n_samples": 256, "n_eval": 64, "n_stats": 256, "n_boundary": 20, "n_guided": 32,
            "reference_m": 100, "guidance_counts": (10, 100, 1000), "pretrain": {}, "finetune": {}},
    True: {"size": 9, "n_samples": 16, "n_eval": 4, "n_stats": 4, "n_boundary": 4, "n_guided": 4,
           "reference_m": 16, "guidance_counts": (4, 16, 64),
           "pretrain": {"epochs": 3, "hidden": 4, "time_steps": 6, "epochs_inverse": 2, "n_samples_inverse": 8},
           "finetune": {"epochs": 2, "time_steps": 6, "k": 2, "k_sub": 2, "batch_size": 2}},
}


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return 0.0 if num == 0 else math.inf


def _by_model(rows: Sequence[Mapping[str, Any]]) -> Dict[str, Mapping[str, Any]]:
    return {row["model"]: row for row in rows}


# ============== Criteria ==============

def residual_direction(base: Mapping[str, float], tuned: Mapping[str, float],
                       ratio: float = RESIDUAL_RATIO) -> Dict[str, Any]:
    """Fine-tuning must cut both the weak and the strong residual to `ratio` of the base model's."""
    weak = _ratio(tuned["weak_mean"], base["weak_mean"])
    strong = _ratio(tuned["strong_mean"], base["strong_mean"])
    return {"weak_ratio": weak, "strong_ratio": strong, "passed": weak <= ratio and strong <= ratio}


def diversity_preservation(base: Mapping[str, float], regularized: Mapping[str, float],
                           unregularized: Mapping[str, float], band: float = DIVERSITY_BAND,
                           drop: float = DIVERSITY_DROP) -> Dict[str, Any]:
    """With the running cost diversity stays within `band` of the base; without it alpha diversity drops."""
    x_change = abs(_ratio(regularized["diversity_x"], base["diversity_x"]) - 1.0)
    a_change = abs(_ratio(regularized["diversity_alpha"], base["diversity_alpha"]) - 1.0)
    a_drop = 1.0 - _ratio(unregularized["diversity_alpha"], base["diversity_alpha"])
    return {"diversity_x_change": x_change, "diversity_alpha_change": a_change, "alpha_drop_without_cost": a_drop,
            "passed": x_change <= band and a_change <= band and a_drop >= drop}


def boundary_enforcement(base: Mapping[str, float], tuned: Mapping[str, float], ratio: float = RESIDUAL_RATIO,
                         weak_slack: float = WEAK_SLACK) -> Dict[str, Any]:
    """Boundary residual at most `ratio` of the base while the weak residual grows by at most `weak_slack`."""
    bc = _ratio(tuned["boundary"], base["boundary"])
    growth = _ratio(tuned["weak"], base["weak"]) - 1.0
    return {"boundary_ratio": bc, "weak_growth": growth, "passed": bc <= ratio and growth <= weak_slack}


def guidance_adherence(rows: Sequence[Mapping[str, float]], reference_m: int,
                       ratio: float = GUIDANCE_RATIO) -> Dict[str, Any]:
    """Guided mismatch at `reference_m` observations within `ratio` of unguided; observed variance
    non-increasing in the number of observations."""
    rows = sorted(rows, key=lambda r: r["m"])
    ref = next((r for r in rows if r["m"] == reference_m), None)
    if ref is None:
        raise ConfigurationError(f"no guidance row with m={reference_m}")
    report: Dict[str, Any] = {}
    for r in rows:
        report[f"mismatch_ratio_m{r['m']}"] = _ratio(r["mismatch_guided"], r["mismatch_unguided"])
        report[f"observed_variance_m{r['m']}"] = r["observed_variance"]
    variances = [r["observed_variance"] for r in rows]
    monotone = all(b <= a for a, b in zip(variances, variances[1:]))
    adherent = report[f"mismatch_ratio_m{reference_m}"] <= ratio
    report.update(variance_monotone=monotone, passed=adherent and monotone)
    return report


# ============== Training ==============

@contextmanager
def _workspace(workdir: Optional[str]) -> Iterator[Path]:
    if workdir is not None:
        root = Path(workdir)
        root.mkdir(parents=True, exist_ok=True)
        yield root
    else:
        with tempfile.TemporaryDirectory(prefix="pdeflow-") as tmp:
            yield Path(tmp)


def _run_stages(stages: Sequence[BaseStage], context: Dict[str, Any]) -> Dict[str, Any]:
    orchestrator = PipelineOrchestrator()
    for stage in stages:
        orchestrator.register_stage(stage)
    result = orchestrator.run(context)
    if not result.success:
        raise _FAILURES.get(result.exit_code, PdeFlowError)(f"experiment pipeline failed: {result.error}")
    return result.result


def train_preset(root: Path, preset: str, seed: int, quick: bool) -> Dict[str, Any]:
    """Data, base model, inverse predictor and fine-tuned model for a preset under `root`."""
    scale = SCALES[quick]
    context: Dict[str, Any] = {
        "problem": FINETUNE_PRESETS[preset]["problem"],
        "preset": preset,
        "size": scale["size"],
        "n_samples": scale["n_samples"],
        "seed": seed,
        "quiet": True,
        "data_dir": str(root / "data"),
        "base_out": str(root / "base"),
        "inverse_out": str(root / "inverse"),
        "finetune_out": str(root / "finetune"),
        "overrides": dict(scale["finetune"]),
        "checkpoint_every": 0,
        **scale["pretrain"],
    }
    logger.info("training preset '%s' under %s (quick=%s)", preset, root, quick)
    return _run_stages([DataGenerationStage(), BasePretrainStage(), InversePretrainStage(), FinetuneStage()],
                       context)


def _evaluate(context: Dict[str, Any], mode: str, models: List[str], n: int, out: Path,
              **extra: Any) -> Dict[str, Mapping[str, Any]]:
    ctx = {**context, "mode": mode, "models": models, "n": n, "out": str(out), **extra}
    return _by_model(_run_stages([EvaluationStage()], ctx)["evaluation"])


# ============== Experiments ==============

def residual_reduction(seed: int = 0, quick: bool = False, workdir: Optional[str] = None) -> Dict[str, Any]:
    """Noisy Darcy: the fine-tuned model's weak and strong residuals against the noisy base model's."""
    with _workspace(workdir) as root:
        ctx = train_preset(root, "denoising", seed, quick)
        rows = _evaluate(ctx, "residuals", [ctx["base_ckpt"], ctx["finetune_ckpt"]], SCALES[quick]["n_eval"],
                         root / "residuals.csv")
    report = residual_direction(rows["base"], rows["finetune"])
    report.update(base_weak=rows["base"]["weak_mean"], finetune_weak=rows["finetune"]["weak_mean"],
                  base_strong=rows["base"]["strong_mean"], finetune_strong=rows["finetune"]["strong_mean"])
    return report


def diversity(seed: int = 0, quick: bool = False, workdir: Optional[str] = None) -> Dict[str, Any]:
    """Relative diversity of base, regularized and unregularized (lambda_f = 0) fine-tuned models."""
    with _workspace(workdir) as root:
        ctx = train_preset(root, "denoising", seed, quick)
        unreg_out = root / "finetune_unregularized"
        ctx = _run_stages([FinetuneStage()], {**ctx, "finetune_out": str(unreg_out),
                                              "overrides": {**ctx["overrides"], "lambda_f": 0.0}})
        rows = _evaluate(ctx, "stats", [ctx["base_ckpt"], str(root / "finetune"), str(unreg_out)],
                         SCALES[quick]["n_stats"], root / "stats.csv")
    report = diversity_preservation(rows["base"], rows["finetune"], rows["finetune_unregularized"])
    report.update({f"{name}_diversity_{key}": rows[name][f"diversity_{key}"]
                   for name in ("base", "finetune", "finetune_unregularized") for key in ("x", "alpha")})
    return report


def boundary(seed: int = 0, quick: bool = False, workdir: Optional[str] = None) -> Dict[str, Any]:
    """Misspecified boundary data: boundary and weak residuals after 4x upsampling."""
    with _workspace(workdir) as root:
        ctx = train_preset(root, "misspec", seed, quick)
        rows = _evaluate(ctx, "superres", [ctx["base_ckpt"], ctx["finetune_ckpt"]], SCALES[quick]["n_boundary"],
                         root / "superres.csv", factor=4)
    report = boundary_enforcement(rows["base"], rows["finetune"])
    report.update(base_boundary=rows["base"]["boundary"], finetune_boundary=rows["finetune"]["boundary"])
    return report


def guidance(seed: int = 0, quick: bool = False, workdir: Optional[str] = None) -> Dict[str, Any]:
    """Observed-node mismatch and spread of guided joint sampling for growing observation counts.

    For each count the strength is tuned over a fixed sweep on shared noise;
    zeta = 0 of the same sweep is the unguided reference.
    """
    scale = SCALES[quick]
    with _workspace(workdir) as root:
        rows = _guidance_rows(train_preset(root, "denoising", seed, quick), scale, seed)
    report = guidance_adherence(rows, scale["reference_m"])
    report.update({f"zeta_m{r['m']}": r["zeta"] for r in rows})
    return report


def _guidance_rows(ctx: Dict[str, Any], scale: Dict[str, Any], seed: int) -> List[Dict[str, float]]:
    model, meta = load_checkpoint(ctx["finetune_ckpt"])
    phi, _ = load_checkpoint(ctx["inverse_ckpt"])
    data = load_dataset(ctx["data_dir"])
    param_grid = residual_problem(dataset_meta(data)).grid.spatial()
    floor = meta.get("floor") or 1.0 / (meta["time_steps"] - 1)
    dyn = inference_dynamics(model, phi, param_grid, floor)
    rows = []
    for m in scale["guidance_counts"]:
        obs = sample_observations(data.params[0], m, make_rng(seed + m))
        table = sweep_zeta(dyn, obs, (0.0, *GUIDANCE_ZETAS), scale["n_guided"], meta["time_steps"], seed)
        guided = table[table["zeta"] > 0]
        best = guided.loc[guided["mismatch"].idxmin()]
        unguided = table[table["zeta"] == 0].iloc[0]
        logger.info("m=%d: best zeta %.3g, mismatch %.4g (unguided %.4g)", m, best["zeta"], best["mismatch"],
                    unguided["mismatch"])
        rows.append({"m": m, "zeta": float(best["zeta"]), "mismatch_guided": float(best["mismatch"]),
                     "mismatch_unguided": float(unguided["mismatch"]),
                     "observed_variance": float(best["observed_variance"])})
    return rows


EXPERIMENTS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "residual-reduction": residual_reduction,
    "diversity": diversity,
    "boundary": boundary,
    "guidance": guidance,
}


class ExperimentStage(BaseStage):
    """Reads: experiment; optional quick, seed, workdir (kept artifacts; a temporary directory otherwise)."""

    def __init__(self):
        super().__init__("Experiment", StageRole.ORACLE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        name = context["experiment"]
        if name not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment '{name}'; choose from {sorted(EXPERIMENTS)}")
        self.record_step(f"running {name}", name, quick=context.get("quick", False))
        report = EXPERIMENTS[name](seed=context.get("seed", 0), quick=context.get("quick", False),
                                   workdir=context.get("workdir"))
        self.record_step("experiment finished", "compare_criteria", **report)
        if not report["passed"]:
            raise NumericalError(f"{name} criteria not met: {json.dumps(report, default=float)}")
        return {"oracle": report}
