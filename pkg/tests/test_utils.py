"""Settings, error mapping, run logs and random streams."""
import numpy as np
import pytest

from src.models.schemas import DatasetSpec, FinetuneConfig, validated
from src.utils.config import FINETUNE_PRESETS, PROBLEM_PRESETS, Settings
from src.utils.errors import ConfigurationError, DegenerateParameterError, NumericalError, config_error_from
from src.utils.logging_setup import RunLog
from src.utils.rng import make_rng, spawn_rngs


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("PDEFLOW_THREADS", "3")
    monkeypatch.setenv("PDEFLOW_GRID_SIZE_2D", "17")
    settings = Settings()
    assert settings.thread_count() == 3
    assert settings.GRID_SIZE_2D == 17
    monkeypatch.setenv("PDEFLOW_THREADS", "0")
    assert Settings().thread_count() >= 1


def test_presets_reference_known_problems():
    for preset in FINETUNE_PRESETS.values():
        assert preset["problem"] in PROBLEM_PRESETS


def test_validation_failures_become_configuration_errors():
    with pytest.raises(ConfigurationError) as info:
        validated(DatasetSpec, problem="darcy", n_samples=0)
    assert "n_samples" in str(info.value)
    assert info.value.exit_code == 2
    assert isinstance(config_error_from(ValueError("plain")), ConfigurationError)


def test_error_hierarchy_and_context():
    err = NumericalError("non-finite loss", step=4, sample=2)
    assert str(err) == "non-finite loss (sample 2, step 4)"
    assert err.exit_code == 3
    assert issubclass(DegenerateParameterError, NumericalError)


def test_finetune_config_derived_values():
    config = FinetuneConfig(lambda_x=2.0, time_steps=65)
    assert config.lam_alpha == 2.0
    assert config.noise_floor == pytest.approx(1 / 64)
    assert config.lct_x == pytest.approx(1.6 * 4)
    assert FinetuneConfig(lambda_x=2.0, lambda_alpha=0.5).lct_alpha == pytest.approx(0.4)


def test_run_log_round_trip(tmp_path):
    log = RunLog(tmp_path / "logs" / "run.jsonl")
    log.write(epoch=0, loss=1.5)
    log.write(epoch=1, loss=np.float64(0.5))
    records = RunLog.read(log.path)
    assert [r["epoch"] for r in records] == [0, 1]
    assert records[1]["loss"] == 0.5
    assert len(RunLog().write(epoch=0)) == 2


def test_streams_are_reproducible_and_independent():
    assert make_rng(5).standard_normal() == make_rng(5).standard_normal()
    a, b = spawn_rngs(5, 2)
    assert a.standard_normal() != b.standard_normal()
