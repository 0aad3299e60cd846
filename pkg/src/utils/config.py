"""
Configuration management for the pdeflow toolkit.
Settings come from environment variables (prefix PDEFLOW_) or a local .env file.
"""
import os
from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="PDEFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application
    APP_NAME: str = "pdeflow"
    APP_VERSION: str = "0.3.0"
    LOG_LEVEL: str = "INFO"

    # Parallelism; None means all cores
    THREADS: Optional[int] = None

    # File paths
    DATA_DIR: str = "./data"
    RUNS_DIR: str = "./runs"

    # Numerics
    DEFAULT_DTYPE: str = "float64"

    # Desk-scale grid defaults
    GRID_SIZE_2D: int = 33
    ACOUSTIC_GRID_SIZE: int = 33
    ACOUSTIC_FRAMES: int = 33
    TIME_STEPS_2D: int = 64
    TIME_STEPS_3D: int = 32

    # Upper bound on test functions evaluated per batched chunk
    TEST_FUNCTION_CHUNK: int = 512

    # Fine-tune checkpoint interval (epochs)
    CHECKPOINT_EVERY: int = 50

    def thread_count(self) -> int:
        """Resolved worker count."""
        if self.THREADS is None or self.THREADS <= 0:
            return os.cpu_count() or 1
        return self.THREADS


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# Dataset families. "values" are the two levels of the thresholded GRF parameter.
PROBLEM_PRESETS = {
    "darcy": {
        "kind": "darcy",
        "grf": {"smoothness_exponent": 2.0, "correlation_length": 3.0},
        "values": (3.0, 12.0),
        "bc": "dirichlet_zero",
        "forcing": 1.0,
        "noisy": False,
    },
    "darcy-noisy": {
        "kind": "darcy",
        "grf": {"smoothness_exponent": 2.0, "correlation_length": 3.0},
        "values": (3.0, 12.0),
        "bc": "dirichlet_zero",
        "forcing": 1.0,
        "noisy": True,
        "noise_fraction": 0.1,  # sigma = fraction * std(u)
    },
    "darcy-misspec": {
        "kind": "darcy",
        "grf": {"smoothness_exponent": 2.0, "correlation_length": 3.0},
        "values": (3.0, 12.0),
        "bc": "dirichlet_top_sin",
        "forcing": 1.0,
        "noisy": False,
    },
    "acoustic": {
        "kind": "acoustic",
        "grf": {"smoothness_exponent": 2.0, "correlation_length": 1.0},
        "values": (2.0, 3.0),
        "bc": "neumann_reflective",
        "dt": 1e-3,
        "horizon": 0.315,
        "bump_variance": 1e-2,
        "noisy": False,
    },
}

# Fine-tuning experiments; epochs and T sized for a workstation
FINETUNE_PRESETS = {
    "denoising": {
        "problem": "darcy-noisy",
        "time_steps": 64,
        "k_last": 0.25,
        "k": 8,
        "k_sub": 8,
        "sigma_range": (1.0, 4.0),
        "n_test": None,  # one per grid node
        "wavelet_prob": 0.5,
        "boundary_weight": 0.0,
        "lambda_x": 1.0,
        "lambda_f": 0.1,
        "epochs": 200,
        "batch_size": 4,
        "learning_rate": 2e-5,
    },
    "misspec": {
        "problem": "darcy-misspec",
        "time_steps": 64,
        "k_last": 0.25,
        "k": 8,
        "k_sub": 8,
        "sigma_range": (1.0, 4.0),
        "n_test": None,
        "wavelet_prob": 0.5,
        "boundary_weight": 10.0,
        "lambda_x": 1.0,
        "lambda_f": 0.1,
        "epochs": 200,
        "batch_size": 4,
        "learning_rate": 2e-5,
    },
    "acoustic": {
        "problem": "acoustic",
        "time_steps": 32,
        "k_last": 0.20,
        "k": 6,
        "k_sub": 4,
        "sigma_range": (1.0, 6.0),
        "n_test": 1000,
        "wavelet_prob": 0.5,
        "boundary_weight": 1.0,
        "lambda_x": 1.0,
        "lambda_f": 0.1,
        "epochs": 100,
        "batch_size": 2,
        "learning_rate": 2e-5,
    },
}

PRETRAIN_PRESETS = {
    "base": {
        "learning_rate": 1e-3,
        "lr_halving_epochs": 50,
        "batch_size": 16,
        "hidden_channels": 32,
        "epochs": 200,
    },
    "inverse": {
        "learning_rate": 1e-4,
        "batch_size": 8,
        "hidden_channels": 32,
        "epochs": 100,
        "n_samples": 256,
    },
}
