import dataclasses
import json
import logging

import numpy as np
import pytest

from mpae import harness
from mpae.exceptions import ConfigError, TrainingDivergedError
from mpae.harness import (
    ExperimentConfig,
    GridSearchSpace,
    cmd_compression_sweep,
    cmd_cross_eval,
    cmd_grid_search,
    cmd_repr_sweep,
    cmd_trainsize_sweep,
    cmd_uncertainty,
    execute_run,
    fit_power_law,
    make_spec,
    relative_performance,
    run_all,
)
from mpae.model import TrainConfig, load_checkpoint
from mpae.representation import SDF, SHARP, Representation
from mpae.synthgen import SynthConfig, generate_dataset
from mpae.utils import read_csv


@pytest.fixture
def identity_experiment(experiment):
    return dataclasses.replace(experiment, debug_model="identity")


@pytest.fixture
def two_datasets(tmp_path, identity_experiment):
    other = generate_dataset(SynthConfig(mu=0.5, grid=8, seed=1), 20, tmp_path / "other")
    datasets = {**identity_experiment.datasets, "other": other.root / "manifest.json"}
    return dataclasses.replace(identity_experiment, datasets=datasets)


def test_grid_search_space():
    space = GridSearchSpace()
    points = space.points()
    assert len(space) == 36
    assert len(points) == 36
    assert len({json.dumps(p, sort_keys=True) for p in points}) == 36
    assert {"loss", "lr", "weight_decay", "activation"} == set(points[0])


def test_run_keys(experiment):
    a = make_spec(experiment, "toy", SHARP)
    assert a.key == make_spec(experiment, "toy", SHARP).key
    assert a.key != make_spec(experiment, "toy", SDF).key
    seeded = make_spec(experiment, "toy", SHARP, train_config=dataclasses.replace(experiment.train, seed=1))
    assert a.key != seeded.key
    assert a.model["activation"] == a.train["activation"]


def test_run_keys_follow_manifest_content(tmp_path, experiment):
    manifest = generate_dataset(SynthConfig(mu=1.0, grid=8, seed=0), 20, tmp_path / "regen")
    config = dataclasses.replace(experiment, datasets={"regen": manifest.root / "manifest.json"})
    first = make_spec(config, "regen", SHARP)
    assert make_spec(config, "regen", SHARP).key == first.key

    generate_dataset(SynthConfig(mu=2.0, grid=8, seed=5), 20, tmp_path / "regen")
    regenerated = make_spec(config, "regen", SHARP)
    assert regenerated.manifest == first.manifest
    assert regenerated.key != first.key


def test_relative_performance():
    assert relative_performance({"a": 0.5, "b": 1.0}) == {"a": 0.5, "b": 1.0}
    assert relative_performance({"a": 0.1, "b": 0.2}, higher_is_better=False) == {"a": 1.0, "b": 0.5}
    assert relative_performance({"a": 0.0, "b": 0.0}, higher_is_better=False) == {"a": 1.0, "b": 1.0}
    nan = relative_performance({"a": float("nan")})
    assert np.isnan(nan["a"])


def test_repr_sweep_identity(identity_experiment):
    outcome = cmd_repr_sweep(identity_experiment)
    assert outcome.ok
    out = identity_experiment.output / "repr_sweep"
    summary = read_csv(out / "summary.csv")
    assert [r["representation"] for r in summary] == ["sdf", "sharp"]
    assert all(float(r["dice_mean"]) == 1.0 for r in summary)
    assert all(float(r["hausdorff_mean"]) == 0.0 for r in summary)

    rows = read_csv(out / "repr_sweep.csv")
    assert list(rows[0]) == ["dataset", "representation", "row_type", "sample_id", "dice", "hausdorff_norm", "flags"]
    assert sum(r["row_type"] == "sample" for r in rows) == 6
    assert sum(r["row_type"] == "aggregate" for r in rows) == 2

    relative = read_csv(out / "relative_performance.csv")
    assert all(float(r["dice_relative"]) == 1.0 for r in relative)
    examples = read_csv(out / "examples.csv")
    assert len(examples) == 4
    assert all((identity_experiment.output / r["file"]).is_file() for r in examples)
    assert len(list((out / "histograms").glob("*.csv"))) == 2
    assert "NOT observed" in (out / "trend.txt").read_text()


def test_repr_sweep_trains_and_resumes(experiment, caplog):
    outcome = cmd_repr_sweep(experiment)
    assert outcome.ok
    for record in outcome.records:
        assert record["status"] == "ok"
        assert record["parameter_count"] > 0
        assert len(record["history"]) == 1
        checkpoint = experiment.artifacts / record["key"] / "model.ckpt"
        assert load_checkpoint(checkpoint).config == experiment.model
    before = {p: p.read_bytes() for p in outcome.files}

    caplog.clear()
    caplog.set_level(logging.INFO, logger="mpae")
    again = cmd_repr_sweep(experiment)
    assert "skipping 2 completed run(s)" in caplog.text
    assert {p: p.read_bytes() for p in again.files} == before


def test_execute_run_failure(experiment):
    spec = dataclasses.replace(make_spec(experiment, "toy", SHARP), manifest="/nonexistent/manifest.json")
    record = execute_run(spec)
    assert record["status"] == "failed"
    assert "error" in record
    assert record["evaluations"] == {}


def test_execute_run_diverged(experiment, monkeypatch):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError(3, 1, {"encoder.stem.weight": 12.0})

    monkeypatch.setattr(harness, "train", diverge)
    record = execute_run(make_spec(experiment, "toy", SHARP))
    assert record["status"] == "diverged"
    assert record["snapshot"] == {
        "epoch": 3,
        "batch": 1,
        "parameter_norms": {"encoder.stem.weight": 12.0},
    }


def test_run_all_reads_back_from_store(identity_experiment, run_store):
    specs = [make_spec(identity_experiment, "toy", rep) for rep in (SHARP, SDF, SHARP)]
    records = run_all(specs, run_store)
    assert len(records) == 3
    assert len(run_store) == 2
    assert records[0] == records[2]
    assert records[0] == run_store[specs[0].key]


def test_run_all_retries_failed_runs(experiment, run_store, monkeypatch, caplog):
    calls = []
    real_train = harness.train

    def flaky_train(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise OSError("disk full")
        return real_train(*args, **kwargs)

    monkeypatch.setattr(harness, "train", flaky_train)
    specs = [make_spec(experiment, "toy", SHARP)]
    assert run_all(specs, run_store)[0]["status"] == "failed"
    assert "OSError: disk full" in run_store[specs[0].key]["error"]

    caplog.set_level(logging.INFO, logger="mpae")
    assert run_all(specs, run_store)[0]["status"] == "ok"
    assert len(calls) == 2
    assert "retrying 1 failed run(s)" in caplog.text

    run_all(specs, run_store)
    assert len(calls) == 2


def test_run_all_keeps_diverged_runs(experiment, run_store, monkeypatch):
    calls = []

    def diverge(*args, **kwargs):
        calls.append(1)
        raise TrainingDivergedError(0, 0, {})

    monkeypatch.setattr(harness, "train", diverge)
    specs = [make_spec(experiment, "toy", SHARP)]
    run_all(specs, run_store)
    run_all(specs, run_store)
    assert run_store[specs[0].key]["status"] == "diverged"
    assert len(calls) == 1


def test_run_all_in_processes(identity_experiment, run_store):
    specs = [make_spec(identity_experiment, "toy", Representation.parse(tag)) for tag in ("sdf", "sharp", "tanh:1/8")]
    records = run_all(specs, run_store, workers=2)
    assert [r["status"] for r in records] == ["ok", "ok", "ok"]
    assert [r["key"] for r in records] == [s.key for s in specs]


def test_grid_search(identity_experiment):
    space = GridSearchSpace(lrs=(1e-3,), weight_decays=(1e-6,), activations=("silu", "relu"))
    outcome = cmd_grid_search(identity_experiment, space)
    assert outcome.ok
    out = identity_experiment.output / "grid_search"
    ranking = read_csv(out / "ranking.csv")
    assert [r["rank"] for r in ranking] == ["1", "2", "3", "4"]
    assert all(float(r["dice"]) == 1.0 for r in ranking)
    assert len(read_csv(out / "top5.csv")) == 4
    assert len(read_csv(out / "parallel_coordinates.csv")) == 4
    observations = (out / "observations.txt").read_text()
    assert "configs: 4" in observations
    assert "diverged: 0" in observations


def test_grid_search_needs_validation_split(tmp_path, identity_experiment):
    manifest = generate_dataset(SynthConfig(mu=1.0, grid=8), 10, tmp_path / "noval", ratios=(0.5, 0.5, 0.0))
    config = dataclasses.replace(identity_experiment, datasets={"noval": manifest.root / "manifest.json"})
    with pytest.raises(ConfigError, match="validation"):
        cmd_grid_search(config)
    with pytest.raises(ConfigError):
        cmd_grid_search(identity_experiment, dataset="missing")


def test_fit_power_law():
    sizes = np.array([10, 40, 160, 640])
    fit = fit_power_law(sizes, 1 - 0.5 * sizes**-0.5)
    assert fit.exponent == pytest.approx(-0.5)
    assert fit.prefactor == pytest.approx(0.5)
    assert fit.n_points == 4
    assert np.isnan(fit_power_law([10, 20], [1.0, 1.0]).exponent)


def test_subsets_are_nested(synthetic_dataset):
    small = harness._subset(synthetic_dataset, 4, 0)
    large = harness._subset(synthetic_dataset, 8, 0)
    assert large[:4] == small
    train_ids = {e.sample_id for e in synthetic_dataset.split("train")}
    assert set(large) <= train_ids


def test_trainsize_sweep(identity_experiment):
    outcome = cmd_trainsize_sweep(identity_experiment, fractions=(1, 1 / 2, 1 / 4))
    rows = read_csv(identity_experiment.output / "trainsize" / "trainsize.csv")
    assert [int(r["n_train"]) for r in rows] == [16, 8, 4, 16, 8, 4]
    assert len(outcome.records) == 6
    fits = read_csv(identity_experiment.output / "trainsize" / "fit.csv")
    assert [r["n_points"] for r in fits] == ["0", "0"]


def test_trainsize_sweep_rejects_tiny_subsets(identity_experiment):
    with pytest.raises(ConfigError):
        cmd_trainsize_sweep(identity_experiment)
    with pytest.raises(ConfigError):
        cmd_trainsize_sweep(identity_experiment, fractions=(1.5,))


def test_cross_eval(two_datasets):
    cmd_cross_eval(two_datasets)
    rows = read_csv(two_datasets.output / "cross_eval" / "matrix.csv")
    assert len(rows) == 8
    pairs = {(r["representation"], r["train_dataset"], r["test_dataset"]) for r in rows}
    assert ("sharp", "toy", "other") in pairs
    assert all(float(r["dice_mean"]) == 1.0 for r in rows)


def test_compression_sweep(identity_experiment):
    cmd_compression_sweep(identity_experiment, latents=(2, 1))
    rows = read_csv(identity_experiment.output / "compression" / "compression.csv")
    assert [float(r["compression_ratio"]) for r in rows] == [4.0, 8.0, 4.0, 8.0]
    assert [int(r["latent_channels"]) for r in rows] == [2, 1, 2, 1]


def test_uncertainty_zero_lr(experiment):
    config = dataclasses.replace(
        experiment, train=TrainConfig(lr=0.0, epochs=1, batch_size=4), representations=[SHARP]
    )
    outcome = cmd_uncertainty(config, n_seeds=3)
    assert outcome.ok
    assert len(outcome.records) == 3
    rows = read_csv(config.output / "uncertainty" / "toy.csv")
    assert list(rows[0]) == ["representation", "metric", "mean", "std", "ci_lo", "ci_hi", "n"]
    dice_row = next(r for r in rows if r["metric"] == "dice")
    assert float(dice_row["std"]) == 0.0
    assert dice_row["ci_lo"] == dice_row["mean"] == dice_row["ci_hi"]
    assert dice_row["n"] == "3"
    assert "8 of 16 training samples" in (config.output / "uncertainty" / "toy.txt").read_text()


def test_uncertainty_validation(experiment):
    with pytest.raises(ConfigError):
        cmd_uncertainty(experiment, n_seeds=1)
    with pytest.raises(ConfigError):
        cmd_uncertainty(experiment, subset_fraction=0.0)


def test_config_precedence(tmp_path, synthetic_dataset):
    data = {
        "profile": "desk",
        "datasets": {"toy": "toy/manifest.json"},
        "train": {"epochs": 3},
        "output": "out",
        "seeds": [7, 8],
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(data))
    config = ExperimentConfig.from_file(path, workers=2, representations=["sharp"])
    assert config.profile == "desk"
    assert config.model == harness.PROFILES["desk"].model
    assert config.train.epochs == 3
    assert config.train.lr == harness.PROFILES["desk"].train.lr
    assert config.output == tmp_path / "out"
    assert config.seeds == [7, 8]
    assert config.workers == 2
    assert config.representations == [SHARP]

    assert ExperimentConfig.from_file(path, profile="full").model == harness.PROFILES["full"].model


def test_config_errors(tmp_path, synthetic_dataset):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"datasets": {"x": "missing.json"}}, base=tmp_path)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({}, profile="laptop")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "none.json")
    with pytest.raises(ConfigError):
        ExperimentConfig(debug_model="oracle")


def test_profile_alias():
    assert harness.get_profile("paper") is harness.PROFILES["full"]
    assert ExperimentConfig.from_dict({}, profile="paper").model == harness.PROFILES["full"].model


def test_ingested_epochs(experiment, synthetic_dataset):
    config = dataclasses.replace(experiment, epochs_ingested=7)
    assert config.train_config(synthetic_dataset).epochs == experiment.train.epochs
    for entry in synthetic_dataset.entries:
        entry.provenance = "ingested"
    assert config.train_config(synthetic_dataset).epochs == 7
