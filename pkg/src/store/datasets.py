"""Reading persisted datasets back through their manifest."""
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
import torch

from ..models.schemas import ArtifactRole, BoundaryCondition
from ..physics.grid import Grid, make_grid
from ..utils.errors import StoreError
from ..utils.rng import make_rng
from .manifest_db import ManifestDatabase
from .tensor_io import load_tensor


@dataclass
class LoadedDataset:
    grid: Grid
    states: torch.Tensor
    params: Optional[torch.Tensor]
    bc: BoundaryCondition
    meta: dict

    @property
    def param_grid(self) -> Grid:
        return self.grid.spatial()

    def __len__(self) -> int:
        return self.states.shape[0]


def _as_db(source: Union[str, Path, ManifestDatabase]) -> ManifestDatabase:
    return source if isinstance(source, ManifestDatabase) else ManifestDatabase(source, create=False)


def load_dataset(source: Union[str, Path, ManifestDatabase], dtype: torch.dtype = torch.float64) -> LoadedDataset:
    db = _as_db(source)
    entry = db.require("states")
    meta = entry.params
    grid = make_grid(meta["dims"], list(zip(meta["lower"], meta["upper"])), temporal=meta["temporal"])
    states = load_tensor(db.resolve(entry)).to(dtype)
    params = None
    if db.get_entry("params") is not None:
        params = load_tensor(db.resolve("params")).to(dtype)
    return LoadedDataset(grid, states, params, BoundaryCondition(meta.get("bc", "none")), meta)


def dataset_iter(source: Union[str, Path, ManifestDatabase],
                 shuffle_seed: Optional[int] = None) -> Iterator[Tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """Yield (state, param) pairs in stored order, or permuted by an explicit seed."""
    db = _as_db(source)
    states_entries = db.list_entries(ArtifactRole.STATE)
    if not states_entries:
        return
    for entry in (states_entries, db.list_entries(ArtifactRole.PARAM)):
        for e in entry:
            if not db.resolve(e).exists():
                raise StoreError(f"missing file {db.resolve(e)}")
    data = load_dataset(db)
    order = np.arange(len(data))
    if shuffle_seed is not None:
        order = make_rng(shuffle_seed).permutation(len(data))
    for i in order:
        yield data.states[i], (data.params[i] if data.params is not None else None)
