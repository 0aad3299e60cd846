"""Utility modules."""

from .config import FINETUNE_PRESETS, PRETRAIN_PRESETS, PROBLEM_PRESETS, Settings, get_settings
from .errors import (ConfigurationError, CorruptionError, DegenerateParameterError, FormatError, NumericalError,
                     PdeFlowError, StoreError)

__all__ = [
    "get_settings", "Settings", "PROBLEM_PRESETS", "FINETUNE_PRESETS", "PRETRAIN_PRESETS",
    "PdeFlowError", "ConfigurationError", "NumericalError", "DegenerateParameterError",
    "StoreError", "FormatError", "CorruptionError",
]
