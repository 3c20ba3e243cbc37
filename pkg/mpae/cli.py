import dataclasses
import datetime
import logging
import typing as t
from pathlib import Path

import typer

from mpae.exceptions import ConfigError, MPAEError
from mpae.harness import (
    ExperimentConfig,
    GridSearchSpace,
    SweepOutcome,
    cmd_compression_sweep,
    cmd_cross_eval,
    cmd_grid_search,
    cmd_repr_sweep,
    cmd_trainsize_sweep,
    cmd_uncertainty,
    debug_model,
    get_profile,
)
from mpae.ingest import ingest_diffuse_volumes
from mpae.metrics import evaluate
from mpae.model import build, load_checkpoint, parameter_count, save_checkpoint, train
from mpae.report import build_report
from mpae.representation import Representation, convert, read_field
from mpae.synthgen import SynthConfig, generate_dataset
from mpae.utils import parse_number, write_csv
from mpae.volume import DatasetManifest, write_volume

app = typer.Typer(help="Interface-representation autoencoder experiments.")

OUTPUT_ENVVAR = "MPAE_OUTPUT_ROOT"


def _now() -> str:
    return datetime.datetime.now().isoformat()


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at debug level.")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _fail(err: MPAEError) -> t.NoReturn:
    typer.echo(f"Error: {err}", err=True)
    raise typer.Exit(code=1)


def _datasets(values: list[str] | None) -> dict[str, str]:
    datasets = {}
    for value in values or []:
        name, sep, path = value.partition("=")
        if not sep:
            path = name
            name = Path(path).parent.name or "dataset"
        datasets[name] = path
    return datasets


def _experiment(
    config: Path | None,
    profile: str | None,
    dataset: list[str] | None,
    out: Path | None,
    representation: list[str] | None,
    workers: int | None,
    debug: str | None,
    epochs: int | None,
) -> ExperimentConfig:
    overrides = {
        "profile": profile,
        "output": out,
        "workers": workers,
        "debug_model": debug,
        "representations": representation or None,
    }
    data = {}
    if dataset:
        data["datasets"] = _datasets(dataset)
    if config is not None:
        experiment = ExperimentConfig.from_file(config, **overrides)
        if dataset:
            experiment = dataclasses.replace(experiment, datasets=data["datasets"])
    else:
        experiment = ExperimentConfig.from_dict(data, **overrides)
    if not experiment.datasets:
        raise ConfigError("No datasets given; use --dataset name=path/to/manifest.json")
    if epochs is not None:
        experiment = dataclasses.replace(
            experiment,
            train=dataclasses.replace(experiment.train, epochs=epochs),
            epochs_ingested=epochs,
        )
    return experiment


def _finish(name: str, outcome: SweepOutcome) -> None:
    for path in outcome.files:
        typer.echo(f"wrote {path}")
    typer.echo(
        f"{_now()}: {name} finished with {len(outcome.records)} run(s), "
        f"{outcome.failed} failed"
    )
    if not outcome.ok:
        raise typer.Exit(code=1)


# shared options of the experiment commands
ConfigOpt = typer.Option(None, "--config", help="JSON experiment config file.")
ProfileOpt = typer.Option(None, help="Named defaults: 'desk' or 'full' (alias 'paper').")
DatasetOpt = typer.Option(None, "--dataset", help="name=path/to/manifest.json, repeatable.")
OutOpt = typer.Option(None, "--out", envvar=OUTPUT_ENVVAR, help="Output root directory.")
ReprOpt = typer.Option(None, "--representation", help="Representation tag, repeatable (e.g. tanh:1/32).")
WorkersOpt = typer.Option(None, help="Number of runs executed in parallel.")
DebugOpt = typer.Option(None, "--debug-model", help="Skip training: 'identity' or 'constant'.")
EpochsOpt = typer.Option(None, help="Override the number of training epochs.")


@app.command("synth-gen")
def synth_gen(
    mu: float = typer.Option(..., help="Mean of the log-radius (voxels)."),
    out: Path = typer.Option(..., help="Output dataset directory."),
    sigma: float = typer.Option(0.5, help="Std of the log-radius."),
    n_samples: t.Optional[int] = typer.Option(None, help="Number of samples (profile default)."),
    grid: t.Optional[int] = typer.Option(None, help="Grid size per axis (profile default)."),
    seed: int = typer.Option(0, help="Generator seed."),
    max_droplets: int = typer.Option(4096, help="Droplet cap per sample."),
    profile: str = typer.Option("desk", help="Named defaults: 'desk' or 'full' (alias 'paper')."),
):
    """Generate a synthetic droplet dataset stored as SDFs."""
    try:
        defaults = get_profile(profile)
        config = SynthConfig(
            mu=mu,
            sigma=sigma,
            grid=grid or defaults.grid,
            seed=seed,
            max_droplets=max_droplets,
        )
        typer.echo(f"{_now()}: Generating synthetic dataset in {out}")
        manifest = generate_dataset(config, n_samples or defaults.n_samples, out)
    except MPAEError as err:
        _fail(err)
    typer.echo(f"{_now()}: Wrote {len(manifest)} samples, splits {manifest.sizes()}")


@app.command()
def ingest(
    source: Path = typer.Argument(..., help="Directory of diffuse-field volumes."),
    out: Path = typer.Option(..., help="Output dataset directory."),
    epsilon_sim: str = typer.Option("1/64", help="Interface thickness of the simulation."),
    patch_size: int = typer.Option(64, help="Edge length of the extracted cubes."),
    count: int = typer.Option(64, help="Patches drawn per volume."),
    empty_threshold: float = typer.Option(0.01, help="Single-phase rejection threshold."),
    seed: int = typer.Option(0, help="Patch placement seed."),
    overwrite: bool = typer.Option(False, "--overwrite", help="Replace an existing dataset in --out."),
):
    """Extract patches from simulation volumes and store them as SDFs."""
    try:
        manifest = ingest_diffuse_volumes(
            source,
            parse_number(epsilon_sim),
            out,
            patch_size=patch_size,
            count=count,
            empty_threshold=empty_threshold,
            seed=seed,
            overwrite=overwrite,
        )
    except MPAEError as err:
        _fail(err)
    typer.echo(f"{_now()}: Ingested {len(manifest)} patches into {out}")


@app.command("convert")
def convert_cmd(
    source: Path = typer.Argument(..., help="Volume file with sidecar."),
    to: str = typer.Option(..., "--to", help="Target tag, e.g. sdf, sharp, tanh:1/32."),
    out: Path = typer.Option(..., help="Output volume path."),
):
    """Convert a volume file to another interface representation."""
    try:
        target = Representation.parse(to)
        field = convert(read_field(source), target)
        write_volume(field.grid, out, target.kind, target.epsilon)
    except MPAEError as err:
        _fail(err)
    typer.echo(f"wrote {out} ({target.label})")


@app.command("train")
def train_cmd(
    manifest: Path = typer.Option(..., help="Dataset manifest."),
    checkpoint: Path = typer.Option(..., help="Checkpoint output path."),
    representation: str = typer.Option("sdf", help="Representation tag."),
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    epochs: t.Optional[int] = EpochsOpt,
    lr: t.Optional[float] = typer.Option(None, help="Learning rate override."),
    seed: t.Optional[int] = typer.Option(None, help="Seed override."),
):
    """Train one autoencoder on the train split."""
    try:
        overrides = {"profile": profile}
        if config is not None:
            experiment = ExperimentConfig.from_file(config, **overrides)
        else:
            experiment = ExperimentConfig.from_dict({}, **overrides)
        dataset = DatasetManifest.load(manifest)
        tc = experiment.train_config(dataset)
        tc = dataclasses.replace(
            tc,
            **{k: v for k, v in {"epochs": epochs, "lr": lr, "seed": seed}.items() if v is not None},
        )
        mc = dataclasses.replace(experiment.model, activation=tc.activation)
        model = build(mc, seed=experiment.init_seed)
        typer.echo(f"{_now()}: Training {parameter_count(model)} parameters")
        result = train(model, dataset, representation, tc)
        save_checkpoint(model, checkpoint)
    except MPAEError as err:
        _fail(err)
    final = result.history[-1] if result.history else float("nan")
    typer.echo(f"{_now()}: Final loss {final:.6g}, checkpoint {checkpoint}")


@app.command("eval")
def eval_cmd(
    manifest: Path = typer.Option(..., help="Dataset manifest."),
    out: Path = typer.Option(..., envvar=OUTPUT_ENVVAR, help="Output directory for CSVs."),
    checkpoint: t.Optional[Path] = typer.Option(None, help="Trained checkpoint."),
    representation: str = typer.Option("sdf", help="Representation tag."),
    split: str = typer.Option("test", help="Split to evaluate."),
    debug: t.Optional[str] = DebugOpt,
):
    """Evaluate a checkpoint (or a debug model) on one split."""
    try:
        if (checkpoint is None) == (debug is None):
            raise ConfigError("Pass exactly one of --checkpoint and --debug-model")
        model = load_checkpoint(checkpoint) if checkpoint else debug_model(debug)
        report = evaluate(model, DatasetManifest.load(manifest), representation, split)
        write_csv(out / "eval.csv", report.rows(), ["sample_id", "dice", "hausdorff_norm", "flags"])
        write_csv(
            out / "histogram.csv",
            report.histogram_rows(),
            ["bin_lo", "bin_hi", "count_truth", "count_pred"],
        )
    except MPAEError as err:
        _fail(err)
    typer.echo(f"dice {report.dice_mean:.4f}, hausdorff {report.hausdorff_mean:.4f}")


@app.command("repr-sweep")
def repr_sweep(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: t.Optional[list[str]] = ReprOpt,
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
):
    """Train and evaluate one model per (dataset, representation)."""
    try:
        experiment = _experiment(config, profile, dataset, out, representation, workers, debug, epochs)
        typer.echo(f"{_now()}: Starting representation sweep")
        outcome = cmd_repr_sweep(experiment)
    except MPAEError as err:
        _fail(err)
    _finish("representation sweep", outcome)


@app.command("grid-search")
def grid_search(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: str = typer.Option("sharp", help="Representation tag."),
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
):
    """Rank the 36 hyper-parameter combinations by validation dice."""
    try:
        experiment = _experiment(config, profile, dataset, out, None, workers, debug, epochs)
        typer.echo(f"{_now()}: Starting grid search")
        outcome = cmd_grid_search(experiment, GridSearchSpace(), representation=representation)
    except MPAEError as err:
        _fail(err)
    _finish("grid search", outcome)


@app.command()
def uncertainty(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: t.Optional[list[str]] = ReprOpt,
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
    n_seeds: int = typer.Option(5, help="Number of repeated trainings."),
    subset_fraction: float = typer.Option(0.5, help="Share of the training split used."),
):
    """Seed-to-seed spread of the metrics with Student-t intervals."""
    try:
        experiment = _experiment(config, profile, dataset, out, representation, workers, debug, epochs)
        typer.echo(f"{_now()}: Starting seed uncertainty study")
        outcome = cmd_uncertainty(experiment, n_seeds, subset_fraction)
    except MPAEError as err:
        _fail(err)
    _finish("uncertainty", outcome)


@app.command("trainsize-sweep")
def trainsize_sweep(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: t.Optional[list[str]] = ReprOpt,
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
    fraction: t.Optional[list[str]] = typer.Option(None, help="Training fraction, repeatable (e.g. 1/4)."),
):
    """Metrics versus training-set size with a power-law fit."""
    try:
        experiment = _experiment(config, profile, dataset, out, representation, workers, debug, epochs)
        fractions = [parse_number(f) for f in fraction] if fraction else (1, 1 / 2, 1 / 4, 1 / 8, 1 / 16)
        typer.echo(f"{_now()}: Starting training-set size sweep")
        outcome = cmd_trainsize_sweep(experiment, fractions)
    except MPAEError as err:
        _fail(err)
    _finish("training-set size sweep", outcome)


@app.command("cross-eval")
def cross_eval(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: t.Optional[list[str]] = ReprOpt,
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
):
    """Train on each dataset, evaluate on every dataset."""
    try:
        experiment = _experiment(config, profile, dataset, out, representation, workers, debug, epochs)
        typer.echo(f"{_now()}: Starting cross-dataset evaluation")
        outcome = cmd_cross_eval(experiment)
    except MPAEError as err:
        _fail(err)
    _finish("cross-dataset evaluation", outcome)


@app.command("compression-sweep")
def compression_sweep(
    config: t.Optional[Path] = ConfigOpt,
    profile: t.Optional[str] = ProfileOpt,
    dataset: t.Optional[list[str]] = DatasetOpt,
    out: t.Optional[Path] = OutOpt,
    representation: t.Optional[list[str]] = ReprOpt,
    workers: t.Optional[int] = WorkersOpt,
    debug: t.Optional[str] = DebugOpt,
    epochs: t.Optional[int] = EpochsOpt,
    latent: t.Optional[list[int]] = typer.Option(None, help="Latent channel count, repeatable."),
):
    """Metrics versus compression ratio (latent channel count)."""
    try:
        experiment = _experiment(config, profile, dataset, out, representation, workers, debug, epochs)
        typer.echo(f"{_now()}: Starting compression sweep")
        outcome = cmd_compression_sweep(experiment, latent or (32, 16, 8, 4, 2, 1))
    except MPAEError as err:
        _fail(err)
    _finish("compression sweep", outcome)


@app.command()
def report(
    results: t.Optional[Path] = typer.Argument(None, envvar=OUTPUT_ENVVAR, help="Results directory."),
    out: t.Optional[Path] = typer.Option(None, help="Report directory (default: <results>/report)."),
    plots: bool = typer.Option(True, help="Render SVG plots."),
):
    """Collect tables, plots and VTK exports into a report directory."""
    if results is None:
        typer.echo(f"Error: pass a results directory or set {OUTPUT_ENVVAR}", err=True)
        raise typer.Exit(code=1)
    outcome = build_report(results, out, plots=plots)
    for path in outcome.files:
        typer.echo(f"wrote {path}")
    for missing in outcome.missing:
        typer.echo(f"missing {missing}")
