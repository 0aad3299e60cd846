"""Exception hierarchy. Each class carries the CLI exit code it maps to."""
import json
from typing import Optional


class PdeFlowError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class ConfigurationError(PdeFlowError):
    """Invalid configuration, arguments or grid geometry."""

    exit_code = 2


class NumericalError(PdeFlowError):
    """Non-finite values, solver non-convergence or training divergence."""

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None, sample: Optional[int] = None):
        where = []
        if sample is not None:
            where.append(f"sample {sample}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.step = step
        self.sample = sample


class DegenerateParameterError(NumericalError):
    """Test-function normalizer of the parameter field vanished."""


class StoreError(PdeFlowError):
    """IO failure on an artifact."""

    exit_code = 4


class FormatError(StoreError):
    """Wrong magic, version or dtype code."""


class CorruptionError(StoreError):
    """Payload length does not match the header."""


def config_error_from(exc: Exception) -> ConfigurationError:
    """Wrap a pydantic ValidationError (or ValueError) into a ConfigurationError."""
    errors = getattr(exc, "errors", None)
    if callable(errors):
        parts = []
        for err in errors():
            loc = ".".join(str(p) for p in err.get("loc", ()))
            parts.append(f"{loc}: {err.get('msg')}" if loc else str(err.get("msg")))
        return ConfigurationError("; ".join(parts))
    return ConfigurationError(str(exc))


def exit_code_for(exc: BaseException) -> int:
    """Exit code for any exception; raw IO and JSON decoding failures map to the store code."""
    if isinstance(exc, PdeFlowError):
        return exc.exit_code
    if isinstance(exc, (OSError, json.JSONDecodeError)):
        return StoreError.exit_code
    return PdeFlowError.exit_code
