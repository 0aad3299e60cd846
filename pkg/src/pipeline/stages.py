"""
Concrete pipeline stages.

Context keys shared between stages:
    data_dir, base_ckpt, inverse_ckpt, finetune_ckpt   artifact directories
    seed, quiet                                        run-wide options
Each stage documents the extra keys it reads.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import pandas as pd
import torch

from ..generative.finetune import finetune
from ..generative.flow import fm_pretrain, sample_base
from ..generative.inference import (export_field_png, generate_pairs, guidance_loss, guided_sample,
                                    inference_dynamics, observed_values, residual_table, sample_joint,
                                    sample_observations, stat_report, superres_evaluate)
from ..models.schemas import (ArtifactRole, BoundaryCondition, DatasetSpec, FinetuneConfig, GuidanceConfig,
                              NormalizerMode, ProblemKind, SparseObservations, TestBatchConfig, validated)
from ..networks.architectures import FinetuneModel, VectorFieldModel
from ..networks.training import inverse_for_samples, train_inverse
from ..physics.datasets import PARAMS_FILE, STATES_FILE, generate_dataset
from ..physics.grid import make_grid
from ..physics.weakform import PhysicsReward, ResidualProblem, residual_heatmap
from ..store.checkpoints import load_checkpoint, save_checkpoint
from ..store.datasets import load_dataset
from ..store.manifest_db import ManifestDatabase
from ..store.tensor_io import save_tensor
from ..utils.config import FINETUNE_PRESETS, PRETRAIN_PRESETS, PROBLEM_PRESETS, get_settings
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.logging_setup import RunLog
from ..utils.rng import make_rng, standard_normal
from .base_stage import BaseStage, PipelineOrchestrator, StageRole
from .oracles import BENCHES

logger = logging.getLogger(__name__)

PRESET_FOR_PROBLEM = {"darcy": "denoising", "darcy-noisy": "denoising", "darcy-misspec": "misspec",
                      "acoustic": "acoustic"}


# ============== Shared helpers ==============

def dataset_meta(data) -> Dict[str, Any]:
    """Problem description carried from a dataset into every checkpoint trained on it."""
    meta = data.meta
    return {"problem": meta["spec"]["problem"], "dims": meta["dims"], "lower": meta["lower"],
            "upper": meta["upper"], "temporal": meta["temporal"], "bc": meta["bc"], "values": meta["values"]}


def residual_problem(meta: Dict[str, Any], normalizer: NormalizerMode = NormalizerMode.WEIGHTED) -> ResidualProblem:
    grid = make_grid(meta["dims"], list(zip(meta["lower"], meta["upper"])), temporal=meta["temporal"])
    kind = ProblemKind(PROBLEM_PRESETS[meta["problem"]]["kind"])
    return ResidualProblem(kind, grid, None, BoundaryCondition(meta["bc"]), normalizer)


def target_boundary(meta: Dict[str, Any]) -> BoundaryCondition:
    """Boundary condition the physics asks for (not necessarily what the data carries)."""
    if PROBLEM_PRESETS[meta["problem"]]["kind"] == ProblemKind.ACOUSTIC.value:
        return BoundaryCondition.NEUMANN_REFLECTIVE
    return BoundaryCondition.DIRICHLET_ZERO


def tf_batch_for(meta: Dict[str, Any], preset: Optional[str] = None) -> TestBatchConfig:
    p = FINETUNE_PRESETS[preset or PRESET_FOR_PROBLEM[meta["problem"]]]
    lo, hi = p["sigma_range"]
    return validated(TestBatchConfig, n_test=p["n_test"], sigma_min=lo, sigma_max=hi,
                     wavelet_prob=p["wavelet_prob"], per_node=p["n_test"] is None)


def default_time_steps(meta: Dict[str, Any]) -> int:
    settings = get_settings()
    return settings.TIME_STEPS_3D if meta["temporal"] else settings.TIME_STEPS_2D


def save_pairs(out: Path, states: torch.Tensor, params: Optional[torch.Tensor], meta: Dict[str, Any],
               seed: int, **extra: Any) -> ManifestDatabase:
    """Persist generated samples in dataset layout so load_dataset reads them back."""
    save_tensor(out / STATES_FILE, states, "float32")
    db = ManifestDatabase(out)
    kind = PROBLEM_PRESETS[meta["problem"]]["kind"]
    spec = {"problem": meta["problem"], "n_samples": int(states.shape[0]), "seed": seed}
    db.add("states", STATES_FILE, ArtifactRole.STATE, seed=seed, problem_kind=kind, spec=spec,
           n_samples=int(states.shape[0]), **{k: v for k, v in meta.items() if k != "problem"}, **extra)
    if params is not None:
        save_tensor(out / PARAMS_FILE, params, "float32")
        db.add("params", PARAMS_FILE, ArtifactRole.PARAM, seed=seed, problem_kind=kind,
               dims=list(params.shape[1:]), note="predicted")
    return db


def _preview(field: torch.Tensor) -> torch.Tensor:
    return field[-1] if field.dim() == 3 else field


# ============== Stages ==============

class DataGenerationStage(BaseStage):
    """Reads: problem, n_samples, data_dir; optional size, frames, noise_sigma."""

    def __init__(self):
        super().__init__("DataGeneration", StageRole.DATA)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        spec = validated(DatasetSpec, problem=context["problem"],
                         size=context.get("size") or get_settings().GRID_SIZE_2D,
                         n_samples=context["n_samples"], noise_sigma=context.get("noise_sigma"),
                         seed=context.get("seed", 0), frames=context.get("frames"))
        self.record_step(f"generating {spec.n_samples} '{spec.problem}' samples", "generate_dataset",
                         size=spec.size, seed=spec.seed)
        info = generate_dataset(spec, context["data_dir"], quiet=context.get("quiet", False))
        self.record_step(f"wrote dataset with noise sigma {info.noise_sigma:.4g}", "register_manifest",
                         root=str(info.root))
        return {"data_dir": str(info.root)}


class BasePretrainStage(BaseStage):
    """Reads: data_dir, base_out; optional epochs, hidden."""

    def __init__(self):
        super().__init__("BasePretrain", StageRole.BASE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        data = load_dataset(context["data_dir"])
        meta = dataset_meta(data)
        preset = PRETRAIN_PRESETS["base"]
        seed = context.get("seed", 0)
        model = VectorFieldModel(tuple(meta["dims"]), context.get("hidden") or preset["hidden_channels"])
        out = Path(context["base_out"])
        run_log = RunLog(out / "train_log.jsonl")
        self.record_step(f"loaded {len(data)} training states", "fm_pretrain",
                         epochs=context.get("epochs", preset["epochs"]))
        history = fm_pretrain(model, data.states, make_rng(seed), epochs=context.get("epochs"),
                              run_log=run_log, quiet=context.get("quiet", False))
        time_steps = context.get("time_steps") or default_time_steps(meta)
        db = ManifestDatabase(save_checkpoint(model, out, seed, PROBLEM_PRESETS[meta["problem"]]["kind"],
                                              dataset=meta, time_steps=time_steps, data_dir=str(context["data_dir"])))
        db.add("train_log", run_log.path.name, ArtifactRole.LOG, seed=seed)
        self.record_step("base model saved", "save_checkpoint", final_loss=history.final_loss)
        return {"base_ckpt": str(out)}


class InversePretrainStage(BaseStage):
    """Reads: base_ckpt, inverse_out; optional n_samples_inverse, epochs_inverse, inverse_source."""

    def __init__(self):
        super().__init__("InversePretrain", StageRole.INVERSE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        base, meta = load_checkpoint(context["base_ckpt"])
        ds = meta["dataset"]
        preset = PRETRAIN_PRESETS["inverse"]
        seed = context.get("seed", 0)
        rng = make_rng(seed)
        n = context.get("n_samples_inverse") or preset["n_samples"]
        if context.get("inverse_source", "base") == "data":
            samples = load_dataset(meta["data_dir"]).states[:n]
            self.record_step(f"training on {samples.shape[0]} dataset states", "load_dataset")
        else:
            samples = sample_base(base, n, rng, meta["time_steps"])
            self.record_step(f"drew {n} base samples", "sample_base", time_steps=meta["time_steps"])
        phi = inverse_for_samples(samples, ds["values"])
        out = Path(context["inverse_out"])
        run_log = RunLog(out / "train_log.jsonl")
        history = train_inverse(phi, samples, residual_problem(ds), tf_batch_for(ds), rng,
                                epochs=context.get("epochs_inverse"), run_log=run_log,
                                quiet=context.get("quiet", False))
        db = ManifestDatabase(save_checkpoint(phi, out, seed, PROBLEM_PRESETS[ds["problem"]]["kind"], dataset=ds,
                                              base_ckpt=str(context["base_ckpt"]), time_steps=meta["time_steps"],
                                              data_dir=meta.get("data_dir")))
        db.add("train_log", run_log.path.name, ArtifactRole.LOG, seed=seed)
        self.record_step("inverse predictor saved", "save_checkpoint",
                         initial=history.initial_loss, final=history.final_loss)
        return {"inverse_ckpt": str(out)}


class FinetuneStage(BaseStage):
    """Reads: base_ckpt, inverse_ckpt, finetune_out; optional preset and `overrides` for FinetuneConfig."""

    def __init__(self):
        super().__init__("Finetune", StageRole.FINETUNE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        base, meta = load_checkpoint(context["base_ckpt"])
        phi, _ = load_checkpoint(context["inverse_ckpt"])
        ds = meta["dataset"]
        preset_name = context.get("preset") or PRESET_FOR_PROBLEM[ds["problem"]]
        preset = FINETUNE_PRESETS[preset_name]
        seed = context.get("seed", 0)
        fields = {k: preset[k] for k in ("time_steps", "k_last", "k", "k_sub", "lambda_x", "lambda_f",
                                          "epochs", "batch_size", "learning_rate", "boundary_weight")}
        fields.update({k: v for k, v in (context.get("overrides") or {}).items() if v is not None})
        config = validated(FinetuneConfig, **fields, seed=seed, test_batch=tf_batch_for(ds, preset_name),
                           problem=PROBLEM_PRESETS[ds["problem"]]["kind"], boundary_target=target_boundary(ds),
                           checkpoint_every=context.get("checkpoint_every", get_settings().CHECKPOINT_EVERY))
        self.record_step(f"fine-tuning with preset '{preset_name}'", "build_config",
                         **config.model_dump(mode="json", exclude={"test_batch"}))

        rng = make_rng(seed)
        problem = residual_problem(ds, config.normalizer)
        reward = PhysicsReward(problem, config.test_batch, rng, config.boundary_weight, config.boundary_target,
                               destandardize=base.destandardize)
        lo, hi = ds["values"]
        ft = FinetuneModel(base, alpha_scale=0.5 * (lo + hi))
        out = Path(context["finetune_out"])
        run_log = RunLog(out / "finetune_log.jsonl")
        kind = PROBLEM_PRESETS[ds["problem"]]["kind"]
        ckpt_meta = dict(dataset=ds, time_steps=config.time_steps, floor=config.noise_floor,
                         inverse_ckpt=str(context["inverse_ckpt"]), data_dir=meta.get("data_dir"),
                         finetune=config.model_dump(mode="json"))

        def on_checkpoint(epoch: int, model: torch.nn.Module):
            save_checkpoint(model, out / f"epoch_{epoch:04d}", seed, kind, **ckpt_meta)

        history = finetune(ft, base, reward, config, rng, phi=phi, param_grid=problem.grid.spatial(),
                           run_log=run_log, on_checkpoint=on_checkpoint, quiet=context.get("quiet", False))
        db = ManifestDatabase(save_checkpoint(ft, out, seed, kind, **ckpt_meta))
        db.add("finetune_log", run_log.path.name, ArtifactRole.LOG, seed=seed)
        self.record_step("fine-tuned model saved", "save_checkpoint",
                         final_loss=history.losses[-1] if history.losses else None,
                         mean_clip_rate=sum(history.clip_rates) / max(len(history.clip_rates), 1))
        return {"finetune_ckpt": str(out)}


class SamplingStage(BaseStage):
    """Reads: model_ckpt, samples_out, n; optional inverse_ckpt."""

    def __init__(self):
        super().__init__("Sampling", StageRole.SAMPLE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        model, meta = load_checkpoint(context["model_ckpt"])
        ds = meta["dataset"]
        phi = load_checkpoint(context["inverse_ckpt"])[0] if context.get("inverse_ckpt") else None
        seed = context.get("seed", 0)
        rng = make_rng(seed)
        n = context["n"]
        if isinstance(model, FinetuneModel):
            if phi is None:
                raise ConfigurationError("joint sampling of a fine-tuned model needs --inverse")
            param_grid = residual_problem(ds).grid.spatial()
            states, params = generate_pairs(model, phi, n, rng, meta["time_steps"], param_grid, meta.get("floor"))
        elif isinstance(model, VectorFieldModel):
            states = sample_base(model, n, rng, meta["time_steps"])
            params = phi(states).detach() if phi is not None else None
        else:
            raise ConfigurationError(f"cannot sample from a '{model.descriptor()['kind']}' checkpoint")
        out = Path(context["samples_out"])
        db = save_pairs(out, states, params, ds, seed, source=str(context["model_ckpt"]))
        png = export_field_png(_preview(states[0]), out / "sample_0.png")
        db.add("preview", png.name, ArtifactRole.REPORT, seed=seed)
        self.record_step(f"generated {n} samples", "save_pairs", joint=params is not None)
        return {"samples_dir": str(out)}


class GuidanceStage(BaseStage):
    """Reads: model_ckpt, inverse_ckpt, zeta, n, samples_out and either obs_file or (obs_data, m)."""

    def __init__(self):
        super().__init__("Guidance", StageRole.GUIDE)

    def _observations(self, context: Dict[str, Any], rng) -> SparseObservations:
        if context.get("obs_file"):
            with open(context["obs_file"]) as f:
                return validated(SparseObservations, **json.load(f))
        if context.get("obs_data"):
            data = load_dataset(context["obs_data"])
            if data.params is None:
                raise ConfigurationError("observation dataset has no ground-truth parameters")
            return sample_observations(data.params[context.get("obs_index", 0)], context.get("m", 100), rng)
        raise ConfigurationError("guidance needs an observation file or a dataset to draw observations from")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        model, meta = load_checkpoint(context["model_ckpt"])
        if not isinstance(model, FinetuneModel):
            raise ConfigurationError("guidance acts on a fine-tuned joint model")
        phi, _ = load_checkpoint(context["inverse_ckpt"])
        ds = meta["dataset"]
        seed = context.get("seed", 0)
        rng = make_rng(seed)
        obs = self._observations(context, rng)
        cfg = validated(GuidanceConfig, zeta=context["zeta"], time_steps=meta["time_steps"])
        floor = meta.get("floor") or 1.0 / (cfg.time_steps - 1)
        dyn = inference_dynamics(model, phi, residual_problem(ds).grid.spatial(), floor)
        n = context["n"]
        x0 = standard_normal(rng, (n, *model.dims))
        a0 = standard_normal(rng, (n, *model.spatial_dims))
        self.record_step(f"{obs.count} observations, zeta={cfg.zeta}", "guided_sample")
        x1, a1 = guided_sample(dyn, obs, cfg, x0, a0)
        _, a_free = sample_joint(dyn, x0, a0, cfg.time_steps)
        report = {"zeta": cfg.zeta, "m": obs.count,
                  "mismatch_guided": float(guidance_loss(a1, obs).mean()),
                  "mismatch_unguided": float(guidance_loss(a_free, obs).mean()),
                  "observed_variance": float(observed_values(a1, obs).var(dim=0, unbiased=False).mean())}
        out = Path(context["samples_out"])
        db = save_pairs(out, model.destandardize(x1), a1, ds, seed, source=str(context["model_ckpt"]),
                        zeta=cfg.zeta)
        (out / "observations.json").write_text(obs.model_dump_json(indent=2))
        (out / "guidance_report.json").write_text(json.dumps(report, indent=2))
        db.add("observations", "observations.json", ArtifactRole.REPORT, seed=seed)
        db.add("guidance_report", "guidance_report.json", ArtifactRole.REPORT, seed=seed, **report)
        self.record_step("guided samples saved", "save_pairs", **report)
        return {"samples_dir": str(out), "guidance": report}


class EvaluationStage(BaseStage):
    """Reads: mode, models (checkpoint list), data_dir, n, out; optional inverse_ckpt, factor, heat_scale."""

    MODES = ("residuals", "stats", "superres", "heatmap")

    def __init__(self):
        super().__init__("Evaluation", StageRole.EVALUATE)

    def _entries(self, context: Dict[str, Any], data, ds, n: int, rng) -> Dict[str, tuple]:
        entries = {}
        if data.params is not None:
            rows = min(n, len(data))
            entries["data"] = (data.states[:rows], data.params[:rows])
        phi = load_checkpoint(context["inverse_ckpt"])[0] if context.get("inverse_ckpt") else None
        param_grid = residual_problem(ds).grid.spatial()
        models = context.get("models") or [p for p in (context.get("base_ckpt"), context.get("finetune_ckpt")) if p]
        for path in models:
            model, meta = load_checkpoint(path)
            if phi is None:
                raise ConfigurationError("model rows need an inverse predictor (--inverse)")
            entries[Path(path).name] = generate_pairs(model, phi, n, rng, meta["time_steps"], param_grid,
                                                      meta.get("floor"))
            self.record_step(f"generated {n} samples from {path}", "generate_pairs")
        return entries

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        mode = context.get("mode", "residuals")
        if mode not in self.MODES:
            raise ConfigurationError(f"unknown evaluation mode '{mode}'")
        data = load_dataset(context["data_dir"])
        ds = dataset_meta(data)
        seed = context.get("seed", 0)
        rng = make_rng(seed)
        n = context.get("n", 16)
        entries = self._entries(context, data, ds, n, rng)
        problem = residual_problem(ds)
        tf_config = tf_batch_for(ds)
        bc = target_boundary(ds)
        out = Path(context["out"])

        if mode == "residuals":
            table = residual_table(entries, problem, tf_config, seed, bc)
        elif mode == "superres":
            factor = context.get("factor", 4)
            rows = []
            for name, (x, a) in entries.items():
                rep = superres_evaluate(x, a, problem, factor, tf_config, make_rng(seed), bc)
                rows.append({"model": name, "factor": factor, **rep.model_dump(exclude={"per_test"})})
            table = pd.DataFrame(rows)
        elif mode == "stats":
            if "data" not in entries:
                raise ConfigurationError("statistics need a dataset with parameters")
            dx, da = entries["data"]
            rows = []
            for name, (x, a) in entries.items():
                rows.append({"model": name, **stat_report(x, dx, a, da).model_dump()})
            table = pd.DataFrame(rows)
        else:
            out.mkdir(parents=True, exist_ok=True)
            rows = []
            scale = context.get("heat_scale", 2.0)
            for name, (x, a) in entries.items():
                heat = residual_heatmap(x[0], a[0], problem, scale)
                png = export_field_png(_preview(heat.values), out / f"heatmap_{name}.png", vmin=0.0)
                rows.append({"model": name, "file": str(png), "max": float(heat.values.max())})
            table = pd.DataFrame(rows)

        if mode != "heatmap":
            out.parent.mkdir(parents=True, exist_ok=True)
            if out.suffix == ".json":
                table.to_json(out, orient="records", indent=2)
            else:
                table.to_csv(out, index=False)
        self.record_step(f"{mode} evaluation over {len(entries)} rows", "write_table", out=str(out))
        return {"evaluation": table.to_dict(orient="records"), "table": table.to_string(index=False)}


class OracleStage(BaseStage):
    """Reads: bench; optional quick (smaller problem sizes), seed."""

    def __init__(self):
        super().__init__("Oracle", StageRole.ORACLE)

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        bench = context["bench"]
        if bench not in BENCHES:
            raise ConfigurationError(f"unknown bench '{bench}'; choose from {sorted(BENCHES)}")
        self.record_step(f"running {bench}", bench)
        report = BENCHES[bench](seed=context.get("seed", 0), quick=context.get("quick", False))
        self.record_step("bench finished", "compare_tolerance", **report)
        if not report["passed"]:
            raise NumericalError(f"{bench} outside tolerance: {json.dumps(report, default=float)}")
        return {"oracle": report}


def build_pipeline(preset: str, workdir: str, n_samples: int = 256, seed: int = 0,
                   quiet: bool = False) -> Tuple[PipelineOrchestrator, Dict[str, Any]]:
    """Orchestrator and initial context for gen-data -> train-base -> train-inverse -> finetune -> evaluate."""
    if preset not in FINETUNE_PRESETS:
        raise ConfigurationError(f"unknown preset '{preset}'")
    root = Path(workdir)
    orchestrator = PipelineOrchestrator()
    for stage in (DataGenerationStage(), BasePretrainStage(), InversePretrainStage(), FinetuneStage()):
        orchestrator.register_stage(stage)
    evaluation = EvaluationStage()
    orchestrator.register_stage(evaluation)
    context: Dict[str, Any] = {
        "problem": FINETUNE_PRESETS[preset]["problem"],
        "preset": preset,
        "n_samples": n_samples,
        "seed": seed,
        "quiet": quiet,
        "data_dir": str(root / "data"),
        "base_out": str(root / "base"),
        "inverse_out": str(root / "inverse"),
        "finetune_out": str(root / "finetune"),
        "out": str(root / "residuals.csv"),
        "mode": "residuals",
        "n": 16,
    }
    return orchestrator, context

