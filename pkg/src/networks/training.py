"""Inverse predictor training: minimize the weak residual of (x, phi(x)) over base samples."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ..models.schemas import TestBatchConfig
from ..physics.weakform import ResidualProblem, sample_test_functions, weak_residual
from ..utils.config import PRETRAIN_PRESETS
from ..utils.errors import ConfigurationError, NumericalError
from ..utils.logging_setup import RunLog, progress_disabled
from .architectures import InversePredictor

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainingHistory:
    epoch_losses: List[float] = field(default_factory=list)
    initial_loss: Optional[float] = None

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss


def inverse_for_samples(samples: torch.Tensor, values: Sequence[float], hidden: Optional[int] = None,
                        n_freq: int = 2) -> InversePredictor:
    """phi with output range [0.5 lo, 1.5 hi] and input statistics of the training states."""
    lo, hi = min(values), max(values)
    hidden = hidden or PRETRAIN_PRESETS["inverse"]["hidden_channels"]
    phi = InversePredictor(tuple(samples.shape[1:]), (0.5 * lo, 1.5 * hi), hidden, n_freq,
                           input_mean=float(samples.mean()), input_std=float(samples.std()))
    return phi


def _weak_loss(phi: InversePredictor, batch: torch.Tensor, problem: ResidualProblem, tfs) -> torch.Tensor:
    return weak_residual(batch, phi(batch), problem, tfs).mean()


def train_inverse(phi: InversePredictor, samples: torch.Tensor, problem: ResidualProblem,
                  tf_config: TestBatchConfig, rng: np.random.Generator, epochs: Optional[int] = None,
                  learning_rate: Optional[float] = None, batch_size: Optional[int] = None,
                  run_log: Optional[RunLog] = None, quiet: bool = False) -> TrainingHistory:
    """Train phi in place on physical-unit states drawn from the base model."""
    preset = PRETRAIN_PRESETS["inverse"]
    epochs = preset["epochs"] if epochs is None else epochs
    learning_rate = learning_rate or preset["learning_rate"]
    batch_size = batch_size or preset["batch_size"]
    if samples.shape[0] == 0:
        raise ConfigurationError("inverse training needs at least one sample")
    history = TrainingHistory()
    if epochs == 0:
        return history

    samples = samples.to(torch.float64)
    with torch.no_grad():
        head = samples[:batch_size]
        history.initial_loss = float(_weak_loss(phi, head, problem, sample_test_functions(problem.grid, tf_config, rng)))
    optimizer = torch.optim.Adam([p for p in phi.parameters() if p.requires_grad], lr=learning_rate)
    n = samples.shape[0]
    for epoch in tqdm(range(epochs), desc="train inverse", disable=progress_disabled(quiet)):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            batch = samples[torch.from_numpy(order[s:s + batch_size])]
            tfs = sample_test_functions(problem.grid, tf_config, rng)
            optimizer.zero_grad()
            loss = _weak_loss(phi, batch, problem, tfs)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite inverse loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += float(loss) * batch.shape[0]
            count += batch.shape[0]
        mean = total / count
        history.epoch_losses.append(mean)
        if run_log is not None:
            run_log.write(stage="inverse", epoch=epoch, loss=mean)
        logger.debug("inverse epoch %d: R_weak %.4e", epoch, mean)
        if mean > DIVERGENCE_FACTOR * history.initial_loss:
            raise NumericalError(f"inverse training diverged at epoch {epoch}: "
                                 f"loss {mean:.3e} > {DIVERGENCE_FACTOR:g} x initial {history.initial_loss:.3e}")
    logger.info("inverse predictor trained: R_weak %.3e -> %.3e", history.initial_loss, history.final_loss)
    return history


def threshold_accuracy(predicted: torch.Tensor, truth: torch.Tensor, values: Sequence[float]) -> float:
    """Fraction of nodes whose midpoint-thresholded prediction matches the binary ground truth."""
    lo, hi = min(values), max(values)
    mid = 0.5 * (lo + hi)
    return float(((predicted > mid) == (truth > mid)).to(torch.float64).mean())
