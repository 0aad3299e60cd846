"""Counter-based random streams (numpy Philox) shared by every stochastic operation."""
from typing import List, Sequence

import numpy as np
import torch


def make_rng(seed: int) -> np.random.Generator:
    """Generator seeded from a 64-bit integer."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    """Independent child streams, one per sample index."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def standard_normal(rng: np.random.Generator, shape: Sequence[int],
                    dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """N(0, 1) draws as a torch tensor."""
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


def uniform(rng: np.random.Generator, shape: Sequence[int], low: float = 0.0, high: float = 1.0,
            dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=tuple(shape))).to(dtype)


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]
