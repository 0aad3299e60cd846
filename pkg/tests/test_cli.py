"""Command-line surface: parsing, exit codes and a tiny end-to-end chain."""
import json

import pytest

from src import cli
from src.cli import _stage_and_context, build_parser, main
from src.pipeline.stages import EvaluationStage
from src.store.checkpoints import load_checkpoint, save_checkpoint
from src.store.datasets import load_dataset


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_guide_requires_zeta_and_observations():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["guide", "--model", "m", "--inverse", "i", "--obs", "o.json", "--n", "2", "--out", "x"])
    with pytest.raises(SystemExit):
        parser.parse_args(["guide", "--model", "m", "--inverse", "i", "--zeta", "1", "--n", "2", "--out", "x"])
    args = parser.parse_args(["guide", "--model", "m", "--inverse", "i", "--obs-data", "d", "--zeta", "0.5",
                              "--n", "2", "--out", "x"])
    assert args.zeta == 0.5 and args.m == 100


def test_finetune_flags_default_to_preset_values():
    args = build_parser().parse_args(["finetune", "--base", "b", "--inverse", "i", "--out", "o"])
    assert args.shared_noise is None
    assert args.lambda_x is None


def test_oracle_gradcheck_quick(capsys):
    assert main(["--quiet", "oracle", "--bench", "gradcheck", "--quick"]) == 0
    assert "ORACLE SUMMARY" in capsys.readouterr().out


def test_invalid_grid_size_exits_with_configuration_code(tmp_path):
    code = main(["--quiet", "gen-data", "--problem", "darcy", "--dims", "1", "--n", "2", "--out", str(tmp_path)])
    assert code == 2


def test_inspect_missing_manifest_exits_with_store_code(tmp_path):
    assert main(["inspect", "--manifest", str(tmp_path / "missing")]) == 4


def test_missing_checkpoint_exits_with_store_code(tmp_path):
    code = main(["--quiet", "sample", "--model", str(tmp_path / "none"), "--n", "1", "--out", str(tmp_path / "o")])
    assert code == 4


def test_evaluate_heat_scale_reaches_the_context():
    args = build_parser().parse_args(["evaluate", "--mode", "heatmap", "--data", "d", "--heat-scale", "3.5",
                                      "--out", "o"])
    _, context = _stage_and_context(args)
    assert context["heat_scale"] == 3.5
    args = build_parser().parse_args(["evaluate", "--data", "d", "--out", "o"])
    assert _stage_and_context(args)[1]["heat_scale"] == 2.0


def test_unexpected_error_is_logged_and_mapped(tmp_path, monkeypatch):
    def broken(args):
        raise RuntimeError("manifest reader crashed")

    monkeypatch.setattr(cli, "_inspect", broken)
    assert main(["inspect", "--manifest", str(tmp_path)]) == 1


def test_guide_with_missing_observation_file_exits_with_store_code(tmp_path, tiny_models):
    _, phi, ft = tiny_models
    dataset = {"problem": "darcy", "dims": [9, 9], "lower": [0.0, 0.0], "upper": [1.0, 1.0], "temporal": False,
               "bc": "dirichlet_zero", "values": [3.0, 12.0]}
    model = save_checkpoint(ft, tmp_path / "ft", 0, "darcy", dataset=dataset, time_steps=5)
    inverse = save_checkpoint(phi, tmp_path / "inverse", 0, "darcy", dataset=dataset, time_steps=5)
    code = main(["--quiet", "guide", "--model", str(model), "--inverse", str(inverse),
                 "--obs", str(tmp_path / "missing.json"), "--zeta", "1.0", "--n", "1", "--out", str(tmp_path / "g")])
    assert code == 4


def test_data_base_sample_chain(tmp_path, capsys):
    data, base, inv, samples = (str(tmp_path / name) for name in ("data", "base", "inverse", "samples"))
    assert main(["--quiet", "gen-data", "--problem", "darcy", "--dims", "9", "--n", "4", "--seed", "1",
                 "--out", data]) == 0
    assert len(load_dataset(data)) == 4

    assert main(["--quiet", "train-base", "--data", data, "--epochs", "1", "--hidden", "4", "--t-steps", "3",
                 "--out", base]) == 0
    model, meta = load_checkpoint(base)
    assert meta["time_steps"] == 3
    assert model.dims == (9, 9)

    assert main(["--quiet", "train-inverse", "--base", base, "--source", "data", "--n-samples", "2",
                 "--epochs", "0", "--out", inv]) == 0
    assert main(["--quiet", "sample", "--model", base, "--inverse", inv, "--n", "2", "--out", samples]) == 0
    pairs = load_dataset(samples)
    assert pairs.states.shape == (2, 9, 9)
    assert pairs.params.shape == (2, 9, 9)

    capsys.readouterr()
    assert main(["inspect", "--manifest", samples, "--export", "json", "--out", str(tmp_path / "m.json")]) == 0
    names = {row["name"] for row in json.loads((tmp_path / "m.json").read_text())}
    assert {"states", "params", "preview"} <= names

    evaluation = EvaluationStage().run({"mode": "stats", "models": [base], "inverse_ckpt": inv, "data_dir": data,
                                        "n": 6, "out": str(tmp_path / "stats.csv")})
    assert evaluation.success, evaluation.error
    # model rows are not capped by the four data rows
    assert any(step.observation.startswith("generated 6 samples") for step in evaluation.steps)


@pytest.mark.slow
def test_finetune_and_guide_chain(tmp_path):
    data, base, inv, ft, guided = (str(tmp_path / n) for n in ("data", "base", "inverse", "ft", "guided"))
    assert main(["--quiet", "gen-data", "--problem", "darcy", "--dims", "9", "--n", "4", "--out", data]) == 0
    assert main(["--quiet", "train-base", "--data", data, "--epochs", "1", "--hidden", "4", "--t-steps", "5",
                 "--out", base]) == 0
    assert main(["--quiet", "train-inverse", "--base", base, "--n-samples", "2", "--epochs", "1",
                 "--out", inv]) == 0
    assert main(["--quiet", "finetune", "--base", base, "--inverse", inv, "--epochs", "1", "--batch-size", "1",
                 "--k", "1", "--checkpoint-every", "1", "--out", ft]) == 0
    assert load_checkpoint(tmp_path / "ft" / "epoch_0001")[1]["time_steps"] == load_checkpoint(ft)[1]["time_steps"]
    assert main(["--quiet", "guide", "--model", ft, "--inverse", inv, "--obs-data", data, "--m", "5",
                 "--zeta", "1.0", "--n", "2", "--out", guided]) == 0
    report = json.loads((tmp_path / "guided" / "guidance_report.json").read_text())
    assert report["m"] == 5
