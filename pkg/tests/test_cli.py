import json

import pytest
from typer.testing import CliRunner

from mpae.cli import app
from mpae.representation import read_field
from mpae.utils import read_csv
from mpae.volume import DatasetManifest

runner = CliRunner()


@pytest.fixture
def dataset(tmp_path):
    result = runner.invoke(
        app, ["synth-gen", "--mu", "1.0", "--out", str(tmp_path / "toy"), "--n-samples", "20", "--grid", "8"]
    )
    assert result.exit_code == 0, result.output
    return tmp_path / "toy" / "manifest.json"


def test_synth_gen(dataset):
    manifest = DatasetManifest.load(dataset)
    assert manifest.sizes() == {"train": 16, "test": 3, "val": 1}


def test_convert(tmp_path, dataset):
    manifest = DatasetManifest.load(dataset)
    source = manifest.resolve(manifest.entries[0])
    out = tmp_path / "converted.f32"
    result = runner.invoke(app, ["convert", str(source), "--to", "tanh:1/32", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Tanh 1/32" in result.output
    assert read_field(out).kind.epsilon == 1 / 32


def test_convert_rejects_tag(tmp_path, dataset):
    manifest = DatasetManifest.load(dataset)
    source = manifest.resolve(manifest.entries[0])
    result = runner.invoke(app, ["convert", str(source), "--to", "vof", "--out", str(tmp_path / "x.f32")])
    assert result.exit_code == 1
    assert "Error" in result.output


def test_train_and_eval(tmp_path, dataset):
    config = tmp_path / "experiment.json"
    config.write_text(
        json.dumps(
            {
                "profile": "desk",
                "model": {"levels": 1, "latent_channels": 2, "base_channels": 4, "groups": 2},
                "train": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
            }
        )
    )
    checkpoint = tmp_path / "model.ckpt"
    result = runner.invoke(
        app,
        ["train", "--manifest", str(dataset), "--checkpoint", str(checkpoint), "--representation", "sharp", "--config", str(config)],
    )
    assert result.exit_code == 0, result.output
    assert checkpoint.is_file()

    out = tmp_path / "eval"
    result = runner.invoke(
        app,
        ["eval", "--manifest", str(dataset), "--checkpoint", str(checkpoint), "--representation", "sharp", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert len(read_csv(out / "eval.csv")) == 3
    assert (out / "histogram.csv").is_file()


def test_eval_needs_one_model(tmp_path, dataset):
    result = runner.invoke(app, ["eval", "--manifest", str(dataset), "--out", str(tmp_path / "e")])
    assert result.exit_code == 1
    assert "exactly one" in result.output


def test_repr_sweep_identity(tmp_path, dataset):
    out = tmp_path / "results"
    result = runner.invoke(
        app,
        [
            "repr-sweep",
            "--dataset",
            f"toy={dataset}",
            "--representation",
            "sdf",
            "--representation",
            "sharp",
            "--debug-model",
            "identity",
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "0 failed" in result.output
    summary = read_csv(out / "repr_sweep" / "summary.csv")
    assert [float(r["dice_mean"]) for r in summary] == [1.0, 1.0]

    result = runner.invoke(app, ["report", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "report" / "index.txt").is_file()


def test_output_root_from_environment(tmp_path, dataset):
    out = tmp_path / "env-results"
    result = runner.invoke(
        app,
        ["cross-eval", "--dataset", f"toy={dataset}", "--representation", "sharp", "--debug-model", "identity"],
        env={"MPAE_OUTPUT_ROOT": str(out)},
    )
    assert result.exit_code == 0, result.output
    assert (out / "cross_eval" / "matrix.csv").is_file()


def test_missing_dataset(tmp_path):
    result = runner.invoke(app, ["repr-sweep", "--out", str(tmp_path / "r")])
    assert result.exit_code == 1
    assert "No datasets" in result.output

    result = runner.invoke(app, ["repr-sweep", "--dataset", f"x={tmp_path / 'none.json'}", "--out", str(tmp_path / "r")])
    assert result.exit_code == 1
    assert "not found" in result.output


def test_report_needs_results(monkeypatch):
    monkeypatch.delenv("MPAE_OUTPUT_ROOT", raising=False)
    result = runner.invoke(app, ["report"])
    assert result.exit_code == 1
