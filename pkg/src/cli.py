"""
Command-line entry point.

Each subcommand fills a context dict and runs one pipeline stage (or the full
pipeline). The process exit code is the stage's exit code.
"""
import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Tuple

import torch

from .models.schemas import ArtifactRole
from .pipeline.base_stage import BaseStage, StageResult
from .pipeline.experiments import EXPERIMENTS, ExperimentStage
from .pipeline.oracles import BENCHES
from .pipeline.stages import (BasePretrainStage, DataGenerationStage, EvaluationStage, FinetuneStage,
                              GuidanceStage, InversePretrainStage, OracleStage, SamplingStage, build_pipeline)
from .store.manifest_db import ManifestDatabase
from .utils.config import FINETUNE_PRESETS, PROBLEM_PRESETS, get_settings
from .utils.errors import PdeFlowError, exit_code_for
from .utils.logging_setup import configure_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdeflow", description="Physics-constrained flow-matching toolkit")
    parser.add_argument("--log-level", default=None, help="Overrides PDEFLOW_LOG_LEVEL")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a PDE dataset")
    p.add_argument("--problem", required=True, choices=sorted(PROBLEM_PRESETS))
    p.add_argument("--dims", type=int, default=None, help="Spatial nodes per axis")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-base", help="Flow-matching pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--t-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-inverse", help="Weak-residual training of the inverse predictor")
    p.add_argument("--base", required=True)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--source", choices=("base", "data"), default="base")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="Joint adjoint-matching fine-tuning")
    p.add_argument("--base", required=True)
    p.add_argument("--inverse", required=True)
    p.add_argument("--preset", choices=sorted(FINETUNE_PRESETS), default=None)
    p.add_argument("--lambda-x", type=float, default=None)
    p.add_argument("--lambda-alpha", type=float, default=None)
    p.add_argument("--lambda-f", type=float, default=None)
    p.add_argument("--k-sub", type=int, default=None)
    p.add_argument("--k-last", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--shared-noise", action="store_true", default=None)
    p.add_argument("--running-cost-in-loss", action="store_true", default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="Draw samples from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--inverse", default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("guide", help="Sparse-observation guided sampling")
    p.add_argument("--model", required=True)
    p.add_argument("--inverse", required=True)
    obs = p.add_mutually_exclusive_group(required=True)
    obs.add_argument("--obs", help="JSON file with indices and values")
    obs.add_argument("--obs-data", help="Dataset to draw observations from")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--obs-index", type=int, default=0)
    p.add_argument("--zeta", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Residual, statistics, super-resolution or heatmap evaluation")
    p.add_argument("--mode", choices=EvaluationStage.MODES, default="residuals")
    p.add_argument("--models", nargs="*", default=[])
    p.add_argument("--inverse", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--heat-scale", type=float, default=2.0, help="Test-function scale in pixels for heatmaps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="Run an exact reference bench")
    p.add_argument("--bench", required=True, choices=sorted(BENCHES))
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("experiment", help="Desk-scale base versus fine-tuned comparison")
    p.add_argument("--name", required=True, choices=sorted(EXPERIMENTS))
    p.add_argument("--quick", action="store_true", help="Smoke-sized run; the verdict is not meaningful")
    p.add_argument("--workdir", default=None, help="Keep artifacts here instead of a temporary directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pipeline", help="gen-data, train-base, train-inverse, finetune and evaluate in one go")
    p.add_argument("--preset", required=True, choices=sorted(FINETUNE_PRESETS))
    p.add_argument("--workdir", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="Summarize or export an artifact manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--role", choices=[r.value for r in ArtifactRole], default=None)
    p.add_argument("--export", choices=("json", "csv"), default=None)
    p.add_argument("--out", default=None)
    return parser


def _stage_and_context(args: argparse.Namespace) -> Tuple[BaseStage, Dict[str, Any]]:
    ctx: Dict[str, Any] = {"seed": args.seed, "quiet": args.quiet}
    cmd = args.command
    if cmd == "gen-data":
        ctx.update(problem=args.problem, size=args.dims, frames=args.frames, n_samples=args.n,
                   noise_sigma=args.noise_sigma, data_dir=args.out)
        return DataGenerationStage(), ctx
    if cmd == "train-base":
        ctx.update(data_dir=args.data, epochs=args.epochs, hidden=args.hidden, time_steps=args.t_steps,
                   base_out=args.out)
        return BasePretrainStage(), ctx
    if cmd == "train-inverse":
        ctx.update(base_ckpt=args.base, n_samples_inverse=args.n_samples, epochs_inverse=args.epochs,
                   inverse_source=args.source, inverse_out=args.out)
        return InversePretrainStage(), ctx
    if cmd == "finetune":
        overrides = {"lambda_x": args.lambda_x, "lambda_alpha": args.lambda_alpha, "lambda_f": args.lambda_f,
                     "k_sub": args.k_sub, "k_last": args.k_last, "k": args.k, "epochs": args.epochs,
                     "batch_size": args.batch_size, "learning_rate": args.lr, "shared_noise": args.shared_noise,
                     "running_cost_in_loss": args.running_cost_in_loss}
        ctx.update(base_ckpt=args.base, inverse_ckpt=args.inverse, preset=args.preset, overrides=overrides,
                   finetune_out=args.out)
        if args.checkpoint_every is not None:
            ctx["checkpoint_every"] = args.checkpoint_every
        return FinetuneStage(), ctx
    if cmd == "sample":
        ctx.update(model_ckpt=args.model, inverse_ckpt=args.inverse, n=args.n, samples_out=args.out)
        return SamplingStage(), ctx
    if cmd == "guide":
        ctx.update(model_ckpt=args.model, inverse_ckpt=args.inverse, obs_file=args.obs, obs_data=args.obs_data,
                   m=args.m, obs_index=args.obs_index, zeta=args.zeta, n=args.n, samples_out=args.out)
        return GuidanceStage(), ctx
    if cmd == "evaluate":
        ctx.update(mode=args.mode, models=args.models, inverse_ckpt=args.inverse, data_dir=args.data, n=args.n,
                   factor=args.factor, heat_scale=args.heat_scale, out=args.out)
        return EvaluationStage(), ctx
    if cmd == "oracle":
        ctx.update(bench=args.bench, quick=args.quick)
        return OracleStage(), ctx
    if cmd == "experiment":
        ctx.update(experiment=args.name, quick=args.quick, workdir=args.workdir)
        return ExperimentStage(), ctx
    raise ValueError(f"no stage for command '{cmd}'")


def _print_summary(name: str, result: StageResult) -> None:
    print(f"\n{'-' * 60}")
    print(f"{name.upper()} SUMMARY")
    print(f"{'-' * 60}")
    print(f"Status: {'SUCCESS' if result.success else 'FAILED'}")
    print(f"Time: {result.execution_time_ms}ms")
    for step in result.steps:
        print(f"  - {step.observation}")
    if result.error:
        print(f"Error: {result.error}")
    elif isinstance(result.result, dict):
        if "table" in result.result:
            print(result.result["table"])
        if "oracle" in result.result:
            print(json.dumps(result.result["oracle"], indent=2, default=float))


def _inspect(args: argparse.Namespace) -> int:
    db = ManifestDatabase(args.manifest, create=False)
    role = ArtifactRole(args.role) if args.role else None
    if args.export:
        out = args.out or f"manifest.{args.export}"
        count = db.export_to_json(out, role) if args.export == "json" else db.export_to_csv(out, role)
        print(f"exported {count} entries to {out}")
    else:
        print(json.dumps(db.get_statistics(), indent=2, default=str))
        frame = db.to_frame(role)
        if not frame.empty:
            print(frame[["name", "role", "path", "seed"]].to_string(index=False))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(args.log_level or settings.LOG_LEVEL)
    torch.set_num_threads(settings.thread_count())
    torch.set_default_dtype(torch.float64)

    try:
        if args.command == "inspect":
            return _inspect(args)
        if args.command == "pipeline":
            orchestrator, context = build_pipeline(args.preset, args.workdir, args.n, args.seed, args.quiet)
            result = orchestrator.run(context)
            print(orchestrator.get_execution_summary())
            _print_summary("pipeline", result)
            return result.exit_code
        stage, context = _stage_and_context(args)
        result = stage.run(context)
    except PdeFlowError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception as e:
        logger.exception("%s failed", args.command)
        return exit_code_for(e)
    _print_summary(stage.name, result)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
