"""
Model checkpoints.

A checkpoint is a directory with one float64 tensor file per state-dict
entry and a manifest. The manifest entry "model" carries the architecture
descriptor and provenance; every tensor file has its own entry.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
import torch.nn as nn

from ..models.schemas import ArtifactRole
from ..networks.architectures import build_model
from ..utils.errors import StoreError
from .manifest_db import ManifestDatabase
from .tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

MODEL_ENTRY = "model"
TENSOR_PREFIX = "tensor:"


def save_checkpoint(model: nn.Module, out_dir: Union[str, Path], seed: Optional[int] = None,
                    problem_kind: Optional[str] = None, **meta: Any) -> Path:
    out = Path(out_dir)
    db = ManifestDatabase(out)
    for key, tensor in model.state_dict().items():
        rel = f"{key}.pdfl"
        save_tensor(out / rel, tensor.detach().to(torch.float64), "float64")
        db.add(f"{TENSOR_PREFIX}{key}", rel, ArtifactRole.CHECKPOINT, seed=seed, problem_kind=problem_kind,
               shape=list(tensor.shape))
    db.add(MODEL_ENTRY, ".", ArtifactRole.CHECKPOINT, seed=seed, problem_kind=problem_kind,
           descriptor=model.descriptor(), **meta)
    logger.info("saved %s checkpoint to %s", model.descriptor()["kind"], out)
    return out


def load_checkpoint(path: Union[str, Path]) -> Tuple[nn.Module, Dict[str, Any]]:
    """Rebuild the model from its descriptor and load every tensor; returns (model, meta)."""
    db = ManifestDatabase(path, create=False)
    entry = db.require(MODEL_ENTRY)
    meta = dict(entry.params)
    model = build_model(meta["descriptor"])
    state = {}
    expected = model.state_dict()
    for e in db.list_entries(ArtifactRole.CHECKPOINT):
        if not e.name.startswith(TENSOR_PREFIX):
            continue
        key = e.name[len(TENSOR_PREFIX):]
        if key not in expected:
            raise StoreError(f"checkpoint {path} has unexpected tensor '{key}'")
        state[key] = load_tensor(db.resolve(e)).to(expected[key].dtype)
    missing = set(expected) - set(state)
    if missing:
        raise StoreError(f"checkpoint {path} is missing tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    meta["seed"] = entry.seed
    meta["problem_kind"] = entry.problem_kind
    return model, meta
