"""Experiment drivers: representation sweep, grid search, seed uncertainty,
training-set-size sweep, cross-dataset evaluation and compression sweep.

Every driver expands its experiment into a list of ``RunSpec`` objects. A run
is identified by the hash of its spec; finished runs are kept in a
``RunStore`` so re-running a driver only executes what is missing.
"""

import concurrent.futures
import dataclasses
import itertools
import json
import logging
import math
import typing as t
from pathlib import Path

import numpy as np

from mpae.abc import DebugModel, RunRecordTypedDict
from mpae.exceptions import ConfigError, TrainingDivergedError
from mpae.metrics import EvaluationReport, evaluate, summarize
from mpae.model import (
    Autoencoder,
    ModelConfig,
    TrainConfig,
    build,
    compression_ratio,
    parameter_count,
    save_checkpoint,
    train,
)
from mpae.representation import (
    DEFAULT_SWEEP,
    SDF,
    SHARP,
    Representation,
    binarize,
    load_field,
)
from mpae.store import RunStore
from mpae.utils import atomic_write, config_hash, derive_rng, file_digest, slug, write_csv
from mpae.volume import (
    DatasetManifest,
    VoxelGrid,
    read_sidecar,
    write_mask,
)

log = logging.getLogger(__name__)


# --- configuration ----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Profile:
    name: str
    grid: int
    n_samples: int
    model: ModelConfig
    train: TrainConfig
    epochs_ingested: int


PROFILES: dict[str, Profile] = {
    "desk": Profile(
        name="desk",
        grid=32,
        n_samples=200,
        model=ModelConfig(levels=3, latent_channels=4, base_channels=8, groups=4),
        train=TrainConfig(lr=1e-4, epochs=20),
        epochs_ingested=20,
    ),
    "full": Profile(
        name="full",
        grid=64,
        n_samples=2000,
        model=ModelConfig(),
        train=TrainConfig(lr=1e-5, epochs=100),
        epochs_ingested=15,
    ),
}


PROFILE_ALIASES = {"paper": "full"}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[PROFILE_ALIASES.get(name, name)]
    except KeyError:
        raise ConfigError(
            f"Unknown profile '{name}', expected one of {sorted(PROFILES)}"
        ) from None


@dataclasses.dataclass
class ExperimentConfig:
    datasets: dict[str, Path] = dataclasses.field(default_factory=dict)
    representations: list[Representation] = dataclasses.field(
        default_factory=lambda: list(DEFAULT_SWEEP)
    )
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2, 3, 4])
    output: Path = Path("results")
    profile: str = "full"
    epochs_ingested: int | None = 15
    init_seed: int = 0
    workers: int = 1
    debug_model: DebugModel | None = None

    def __post_init__(self):
        self.datasets = {name: Path(path) for name, path in self.datasets.items()}
        missing = [str(p) for p in self.datasets.values() if not p.is_file()]
        if missing:
            raise ConfigError(f"Manifest(s) not found: {', '.join(missing)}")
        self.representations = [Representation.parse(r) for r in self.representations]
        if not self.representations:
            raise ConfigError("At least one representation is required")
        self.output = Path(self.output)
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.debug_model not in (None, "identity", "constant"):
            raise ConfigError(f"Unknown debug model '{self.debug_model}'")

    @classmethod
    def from_profile(cls, name: str, **kwargs) -> "ExperimentConfig":
        profile = get_profile(name)
        kwargs.setdefault("model", profile.model)
        kwargs.setdefault("train", profile.train)
        kwargs.setdefault("epochs_ingested", profile.epochs_ingested)
        return cls(profile=name, **kwargs)

    @classmethod
    def from_dict(
        cls, data: dict, base: str | Path = ".", **overrides
    ) -> "ExperimentConfig":
        """Build from the JSON config grammar; relative paths resolve against ``base``.

        Precedence: profile defaults < ``data`` < ``overrides``.
        """
        data = dict(data)
        profile = get_profile(overrides.pop("profile", None) or data.pop("profile", "full"))
        data.pop("profile", None)
        base = Path(base)
        model = {**profile.model.to_dict(), **data.pop("model", {})}
        train_cfg = {**profile.train.to_dict(), **data.pop("train", {})}
        datasets = {
            name: base / path for name, path in data.pop("datasets", {}).items()
        }
        if "output" in data:
            data["output"] = base / data["output"]
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown config field(s): {', '.join(sorted(unknown))}")
        data.setdefault("epochs_ingested", profile.epochs_ingested)
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(
                datasets=datasets,
                model=ModelConfig.from_dict(model),
                train=TrainConfig.from_dict(train_cfg),
                profile=profile.name,
                **data,
            )
        except TypeError as err:
            raise ConfigError(f"Invalid experiment config: {err}") from err

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"Config file '{path}' does not exist") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"Config file '{path}' is not valid JSON: {err}") from err
        return cls.from_dict(data, base=path.parent, **overrides)

    def manifest(self, name: str) -> DatasetManifest:
        return DatasetManifest.load(self.datasets[name])

    def train_config(self, manifest: DatasetManifest) -> TrainConfig:
        ingested = any(e.provenance == "ingested" for e in manifest)
        if ingested and self.epochs_ingested is not None:
            return dataclasses.replace(self.train, epochs=self.epochs_ingested)
        return self.train

    def store(self) -> RunStore:
        return RunStore(self.output / "runs")

    @property
    def artifacts(self) -> Path:
        return self.output / "artifacts"


@dataclasses.dataclass(frozen=True)
class GridSearchSpace:
    losses: tuple[str, ...] = ("l1", "mse")
    lrs: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    weight_decays: tuple[float, ...] = (1e-4, 1e-6)
    activations: tuple[str, ...] = ("silu", "relu", "tanh")

    def points(self) -> list[dict]:
        return [
            {"loss": loss, "lr": lr, "weight_decay": wd, "activation": act}
            for loss, lr, wd, act in itertools.product(
                self.losses, self.lrs, self.weight_decays, self.activations
            )
        ]

    def __len__(self) -> int:
        return len(self.losses) * len(self.lrs) * len(self.weight_decays) * len(self.activations)


# --- runs -------------------------------------------------------------------


class IdentityModel:
    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, copy=True)


class ConstantModel:
    def __init__(self, value: float = 0.0):
        self.value = value

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(x, self.value)


def debug_model(kind: DebugModel):
    if kind == "identity":
        return IdentityModel()
    if kind == "constant":
        return ConstantModel()
    raise ConfigError(f"Unknown debug model '{kind}'")


@dataclasses.dataclass(frozen=True)
class EvalTarget:
    dataset: str
    manifest: str
    split: str = "test"

    @property
    def label(self) -> str:
        return f"{self.dataset}/{self.split}"


@dataclasses.dataclass(frozen=True)
class RunSpec:
    dataset: str
    manifest: str
    representation: str
    model: dict
    train: dict
    evals: tuple[EvalTarget, ...]
    init_seed: int = 0
    train_subset: tuple[str, ...] | None = None
    debug_model: DebugModel | None = None
    # content hash of every manifest the run reads
    data_digest: str = ""

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["evals"] = [dataclasses.asdict(e) for e in self.evals]
        data["train_subset"] = list(self.train_subset) if self.train_subset else None
        return data

    @property
    def key(self) -> str:
        return config_hash(self.to_dict())


def make_spec(
    config: ExperimentConfig,
    dataset: str,
    representation: Representation,
    evals: t.Sequence[EvalTarget] | None = None,
    train_config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    train_subset: t.Sequence[str] | None = None,
) -> RunSpec:
    manifest_path = config.datasets[dataset]
    tc = train_config or config.train_config(config.manifest(dataset))
    mc = dataclasses.replace(model_config or config.model, activation=tc.activation)
    if evals is None:
        evals = (EvalTarget(dataset, str(manifest_path), "test"),)
    manifests = sorted({str(manifest_path), *(e.manifest for e in evals)})
    return RunSpec(
        dataset=dataset,
        manifest=str(manifest_path),
        representation=representation.tag,
        model=mc.to_dict(),
        train=tc.to_dict(),
        evals=tuple(evals),
        init_seed=config.init_seed,
        train_subset=tuple(train_subset) if train_subset is not None else None,
        debug_model=config.debug_model,
        data_digest=config_hash([file_digest(p) for p in manifests]),
    )


def evaluation_record(report: EvaluationReport) -> dict:
    return {
        "dice_mean": report.dice_mean,
        "hausdorff_mean": report.hausdorff_mean,
        "n": len(report.results),
        "rows": report.rows(),
        "histogram": report.histogram_rows(),
    }


def _save_examples(model, manifest: DatasetManifest, representation: str, out: Path) -> None:
    entries = manifest.split("test")
    if not entries:
        return
    entry = entries[0]
    field = load_field(manifest, entry, representation)
    prediction = model.reconstruct(field.grid.data)
    pred_field = dataclasses.replace(field, grid=VoxelGrid(prediction))
    write_mask(binarize(field), out / f"truth_{entry.sample_id}.f32")
    write_mask(binarize(pred_field), out / f"pred_{entry.sample_id}.f32")


def execute_run(spec: RunSpec, artifacts: Path | None = None) -> RunRecordTypedDict:
    """Train (unless a debug model is requested) and evaluate one run.

    Never raises for run-level problems; the outcome is in ``status``.
    """
    record: RunRecordTypedDict = {
        "key": spec.key,
        "status": "ok",
        "spec": spec.to_dict(),
        "history": [],
        "parameter_count": 0,
        "evaluations": {},
    }
    run_dir = artifacts / spec.key if artifacts is not None else None
    try:
        manifest = DatasetManifest.load(spec.manifest)
        if spec.debug_model is not None:
            model = debug_model(spec.debug_model)
        else:
            tc = TrainConfig.from_dict(spec.train)
            model = build(ModelConfig.from_dict(spec.model), seed=spec.init_seed)
            record["parameter_count"] = parameter_count(model)
            entries = None
            if spec.train_subset is not None:
                wanted = set(spec.train_subset)
                entries = [e for e in manifest if e.sample_id in wanted]
            result = train(model, manifest, spec.representation, tc, entries)
            record["history"] = result.history
        for target in spec.evals:
            report = evaluate(
                model, DatasetManifest.load(target.manifest), spec.representation, target.split
            )
            record["evaluations"][target.label] = evaluation_record(report)
        if run_dir is not None:
            if isinstance(model, Autoencoder):
                save_checkpoint(model, run_dir / "model.ckpt")
            _save_examples(model, manifest, spec.representation, run_dir / "examples")
    except TrainingDivergedError as err:
        log.warning(f"run {spec.key} diverged: {err}")
        record["status"] = "diverged"
        record["error"] = str(err)
        record["snapshot"] = err.snapshot
    except Exception as err:
        log.exception(f"run {spec.key} failed")
        record["status"] = "failed"
        record["error"] = f"{type(err).__name__}: {err}"
    return record


COMPLETED_STATUSES = ("ok", "diverged")


def _is_complete(store: RunStore, key: str) -> bool:
    return key in store and store[key]["status"] in COMPLETED_STATUSES


def run_all(
    specs: t.Sequence[RunSpec],
    store: RunStore,
    workers: int = 1,
    artifacts: Path | None = None,
) -> list[RunRecordTypedDict]:
    """Execute every spec without a completed record in ``store``.

    Runs stored as ``failed`` are executed again. Returns records in spec order.
    """
    pending: dict[str, RunSpec] = {}
    retried = 0
    for spec in specs:
        if spec.key in pending or _is_complete(store, spec.key):
            continue
        pending[spec.key] = spec
        retried += spec.key in store
    skipped = len({s.key for s in specs}) - len(pending)
    if skipped:
        log.info(f"skipping {skipped} completed run(s)")
    if retried:
        log.info(f"retrying {retried} failed run(s)")
    todo = list(pending.values())
    if workers > 1 and len(todo) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(execute_run, spec, artifacts) for spec in todo]
            for spec, future in zip(todo, futures):
                store[spec.key] = future.result()
    else:
        for idx, spec in enumerate(todo):
            log.info(f"run {idx + 1}/{len(todo)}: {spec.dataset} {spec.representation}")
            store[spec.key] = execute_run(spec, artifacts)
    return [store[spec.key] for spec in specs]


@dataclasses.dataclass
class SweepOutcome:
    records: list[RunRecordTypedDict]
    files: list[Path] = dataclasses.field(default_factory=list)

    @property
    def failed(self) -> int:
        return sum(r["status"] == "failed" for r in self.records)

    @property
    def ok(self) -> bool:
        return self.failed == 0


def _evaluation(record: RunRecordTypedDict, label: str) -> dict | None:
    if record["status"] != "ok":
        return None
    return record["evaluations"].get(label)


def _metric(record: RunRecordTypedDict, label: str, key: str) -> float:
    evaluation = _evaluation(record, label)
    if evaluation is None or evaluation[key] is None:
        return float("nan")
    return float(evaluation[key])


def _run(config: ExperimentConfig, specs: list[RunSpec]) -> list[RunRecordTypedDict]:
    return run_all(specs, config.store(), config.workers, config.artifacts)


# --- representation sweep ---------------------------------------------------


def relative_performance(values: dict[str, float], higher_is_better: bool = True) -> dict[str, float]:
    """Each value relative to the best one, so the best scores 1.0."""
    finite = [v for v in values.values() if math.isfinite(v)]
    if not finite:
        return {k: float("nan") for k in values}
    best = max(finite) if higher_is_better else min(finite)
    relative = {}
    for name, value in values.items():
        if not math.isfinite(value):
            relative[name] = float("nan")
        elif higher_is_better:
            relative[name] = value / best if best else float(value == best)
        else:
            relative[name] = best / value if value else 1.0
    return relative


def cmd_repr_sweep(config: ExperimentConfig) -> SweepOutcome:
    out = config.output / "repr_sweep"
    grid = [(ds, rep) for ds in config.datasets for rep in config.representations]
    specs = [make_spec(config, ds, rep) for ds, rep in grid]
    records = _run(config, specs)

    rows, summary, relative_rows, example_rows, files = [], [], [], [], []
    trend = []
    for ds in config.datasets:
        label = f"{ds}/test"
        dice_by_rep, hd_by_rep = {}, {}
        for (d, rep), spec, record in zip(grid, specs, records):
            if d != ds:
                continue
            evaluation = _evaluation(record, label)
            for row in evaluation["rows"] if evaluation else []:
                rows.append({"dataset": ds, "representation": rep.tag, "row_type": "sample", **row})
            dice_by_rep[rep.tag] = _metric(record, label, "dice_mean")
            hd_by_rep[rep.tag] = _metric(record, label, "hausdorff_mean")
            rows.append(
                {
                    "dataset": ds,
                    "representation": rep.tag,
                    "row_type": "aggregate",
                    "sample_id": "",
                    "dice": dice_by_rep[rep.tag],
                    "hausdorff_norm": hd_by_rep[rep.tag],
                    "flags": record["status"],
                }
            )
            summary.append(
                {
                    "dataset": ds,
                    "representation": rep.tag,
                    "label": rep.label,
                    "status": record["status"],
                    "dice_mean": dice_by_rep[rep.tag],
                    "hausdorff_mean": hd_by_rep[rep.tag],
                    "n": evaluation["n"] if evaluation else 0,
                }
            )
            if evaluation:
                files.append(
                    write_csv(
                        out / "histograms" / f"{slug(ds)}_{slug(rep.tag)}.csv",
                        evaluation["histogram"],
                        ["bin_lo", "bin_hi", "count_truth", "count_pred"],
                    )
                )
            examples = config.artifacts / spec.key / "examples"
            for path in sorted(examples.glob("*.f32")):
                example_rows.append(
                    {
                        "dataset": ds,
                        "representation": rep.tag,
                        "file": path.relative_to(config.output).as_posix(),
                    }
                )
        rel_dice = relative_performance(dice_by_rep)
        rel_hd = relative_performance(hd_by_rep, higher_is_better=False)
        for tag in dice_by_rep:
            relative_rows.append(
                {
                    "dataset": ds,
                    "representation": tag,
                    "dice_relative": rel_dice[tag],
                    "hausdorff_relative": rel_hd[tag],
                }
            )
        if SHARP.tag in dice_by_rep and SDF.tag in dice_by_rep:
            sharp, sdf = dice_by_rep[SHARP.tag], dice_by_rep[SDF.tag]
            observed = sharp > sdf
            line = (
                f"{ds}: mean test dice Sharp {sharp:.4f} vs SDF {sdf:.4f}: "
                f"{'observed' if observed else 'NOT observed'} (expected Sharp > SDF)"
            )
            if not observed:
                log.warning(line)
            trend.append(line)

    files.append(
        write_csv(
            out / "repr_sweep.csv",
            rows,
            ["dataset", "representation", "row_type", "sample_id", "dice", "hausdorff_norm", "flags"],
        )
    )
    files.append(
        write_csv(
            out / "summary.csv",
            summary,
            ["dataset", "representation", "label", "status", "dice_mean", "hausdorff_mean", "n"],
        )
    )
    files.append(
        write_csv(
            out / "relative_performance.csv",
            relative_rows,
            ["dataset", "representation", "dice_relative", "hausdorff_relative"],
        )
    )
    files.append(
        write_csv(out / "examples.csv", example_rows, ["dataset", "representation", "file"])
    )
    trend_path = out / "trend.txt"
    atomic_write(trend_path, "\n".join(trend) + ("\n" if trend else ""))
    files.append(trend_path)
    return SweepOutcome(records, files)


# --- grid search -------------------------------------------------------------


GRID_FIELDS = ["loss", "lr", "weight_decay", "activation"]


def cmd_grid_search(
    config: ExperimentConfig,
    space: GridSearchSpace | None = None,
    dataset: str | None = None,
    representation: Representation | str = SHARP,
) -> SweepOutcome:
    """Train every point of ``space`` and rank them by validation dice.

    Diverged or failed runs score 0.
    """
    space = space or GridSearchSpace()
    representation = Representation.parse(representation)
    dataset = dataset or next(iter(config.datasets), None)
    if dataset not in config.datasets:
        raise ConfigError(f"Unknown dataset '{dataset}'")
    manifest = config.manifest(dataset)
    if not manifest.split("val"):
        raise ConfigError(f"Dataset '{dataset}' has an empty validation split")
    base = config.train_config(manifest)
    target = EvalTarget(dataset, str(config.datasets[dataset]), "val")
    points = space.points()
    specs = [
        make_spec(
            config,
            dataset,
            representation,
            evals=(target,),
            train_config=dataclasses.replace(base, **point),
        )
        for point in points
    ]
    records = _run(config, specs)

    rows = []
    for idx, (point, record) in enumerate(zip(points, records)):
        score = _metric(record, target.label, "dice_mean")
        rows.append(
            {
                **point,
                "index": idx,
                "status": record["status"],
                "dice": score if math.isfinite(score) else 0.0,
            }
        )
    ranked = sorted(rows, key=lambda r: (-r["dice"], r["index"]))
    for rank, row in enumerate(ranked, start=1):
        row["rank"] = rank

    out = config.output / "grid_search"
    columns = ["rank"] + GRID_FIELDS + ["status", "dice"]
    files = [
        write_csv(out / "ranking.csv", ranked, columns),
        write_csv(out / "top5.csv", ranked[:5], columns),
        write_csv(out / "parallel_coordinates.csv", rows, GRID_FIELDS + ["dice"]),
    ]
    comparison = [
        row
        for row in rows
        if row["activation"] == "silu" and row["weight_decay"] == 1e-6 and row["lr"] in (1e-4, 1e-5)
    ]
    files.append(
        write_csv(out / "loss_comparison.csv", comparison, ["loss", "lr", "status", "dice"])
    )
    best = ranked[0] if ranked else None
    lines = [f"dataset: {dataset}", f"representation: {representation.label}", f"configs: {len(rows)}"]
    if best is not None:
        lines.append(
            "best: " + ", ".join(f"{k}={best[k]}" for k in GRID_FIELDS) + f", dice={best['dice']:.4f}"
        )
        for key, expected in (("weight_decay", 1e-6), ("activation", "silu")):
            seen = "observed" if best[key] == expected else "not observed"
            lines.append(f"expected best {key}={expected}: {seen}")
    diverged = sum(r["status"] == "diverged" for r in rows)
    lines.append(f"diverged: {diverged}")
    observations = out / "observations.txt"
    atomic_write(observations, "\n".join(lines) + "\n")
    files.append(observations)
    return SweepOutcome(records, files)


# --- seed uncertainty --------------------------------------------------------


def _subset(manifest: DatasetManifest, size: int, seed: int) -> list[str]:
    """First ``size`` training ids of a fixed permutation; prefixes are nested."""
    ids = sorted(e.sample_id for e in manifest.split("train"))
    order = derive_rng(seed, "subset").permutation(len(ids))
    return [ids[i] for i in order[:size]]


def _seeds(config: ExperimentConfig, n: int) -> list[int]:
    seeds = list(config.seeds)
    while len(seeds) < n:
        seeds.append(max(seeds, default=-1) + 1)
    return seeds[:n]


def cmd_uncertainty(
    config: ExperimentConfig, n_seeds: int = 5, subset_fraction: float = 0.5
) -> SweepOutcome:
    """Repeat training with ``n_seeds`` seeds on a fixed training subset."""
    if n_seeds < 2:
        raise ConfigError(f"Seed uncertainty needs at least 2 seeds, got {n_seeds}")
    if not 0 < subset_fraction <= 1:
        raise ConfigError(f"subset_fraction must lie in (0, 1], got {subset_fraction}")
    seeds = _seeds(config, n_seeds)
    out = config.output / "uncertainty"
    records, files = [], []
    for ds in config.datasets:
        manifest = config.manifest(ds)
        n_train = len(manifest.split("train"))
        subset = _subset(manifest, max(1, round(subset_fraction * n_train)), config.train.seed)
        base = config.train_config(manifest)
        grid = [(rep, seed) for rep in config.representations for seed in seeds]
        specs = [
            make_spec(
                config,
                ds,
                rep,
                train_config=dataclasses.replace(base, seed=seed),
                train_subset=subset,
            )
            for rep, seed in grid
        ]
        ds_records = _run(config, specs)
        records.extend(ds_records)
        label = f"{ds}/test"
        rows, notes = [], []
        for rep in config.representations:
            per_rep = [r for (g, _), r in zip(grid, ds_records) if g == rep]
            for metric in ("dice", "hausdorff"):
                values = [_metric(r, label, f"{metric}_mean") for r in per_rep]
                values = [v for v in values if math.isfinite(v)]
                if len(values) < 2:
                    log.warning(f"{ds} {rep.label}: fewer than 2 finished runs for {metric}")
                    continue
                stats = summarize(values)
                rows.append(stats.row(rep.tag, metric))
                if metric == "dice":
                    notes.append(
                        f"{rep.label}: dice {stats.mean:.4f} +- {stats.std:.4f} "
                        f"(CI {stats.ci_lo:.4f}..{stats.ci_hi:.4f}, n={stats.n}); "
                        "reference std for Sharp at full scale is of order 0.004"
                    )
        files.append(
            write_csv(
                out / f"{slug(ds)}.csv",
                rows,
                ["representation", "metric", "mean", "std", "ci_lo", "ci_hi", "n"],
            )
        )
        note_path = out / f"{slug(ds)}.txt"
        atomic_write(
            note_path,
            f"dataset {ds}: {len(subset)} of {n_train} training samples, seeds {seeds}\n"
            + "\n".join(notes)
            + "\n"
        )
        files.append(note_path)
    return SweepOutcome(records, files)


# --- training-set size -------------------------------------------------------


class PowerLawFit(t.NamedTuple):
    exponent: float
    prefactor: float
    n_points: int


def fit_power_law(sizes: t.Sequence[float], dice_values: t.Sequence[float]) -> PowerLawFit:
    """Least-squares fit of ``1 - dice = c * N**k`` in log-log space."""
    sizes = np.asarray(sizes, dtype=float)
    error = 1.0 - np.asarray(dice_values, dtype=float)
    valid = np.isfinite(error) & (error > 0) & (sizes > 0)
    if np.count_nonzero(valid) < 2:
        return PowerLawFit(float("nan"), float("nan"), int(np.count_nonzero(valid)))
    k, log_c = np.polyfit(np.log(sizes[valid]), np.log(error[valid]), 1)
    return PowerLawFit(float(k), float(np.exp(log_c)), int(np.count_nonzero(valid)))


def cmd_trainsize_sweep(
    config: ExperimentConfig,
    fractions: t.Sequence[float] = (1, 1 / 2, 1 / 4, 1 / 8, 1 / 16),
    min_samples: int = 4,
) -> SweepOutcome:
    """Train on nested subsets of the training split, evaluate on the test split."""
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError(f"Fractions must lie in (0, 1], got {list(fractions)}")
    out = config.output / "trainsize"
    records, rows, fits = [], [], []
    for ds in config.datasets:
        manifest = config.manifest(ds)
        n_train = len(manifest.split("train"))
        sizes = [max(1, round(f * n_train)) for f in fractions]
        if len(fractions) > 1 and min(sizes) < min_samples:
            raise ConfigError(
                f"Dataset '{ds}' has {n_train} training samples; the smallest "
                f"fraction gives {min(sizes)} < {min_samples}"
            )
        full = _subset(manifest, n_train, config.train.seed)
        grid = [(rep, f, n) for rep in config.representations for f, n in zip(fractions, sizes)]
        specs = [
            make_spec(config, ds, rep, train_subset=full[:n]) for rep, _, n in grid
        ]
        ds_records = _run(config, specs)
        records.extend(ds_records)
        label = f"{ds}/test"
        for (rep, f, n), record in zip(grid, ds_records):
            rows.append(
                {
                    "dataset": ds,
                    "representation": rep.tag,
                    "fraction": float(f),
                    "n_train": n,
                    "status": record["status"],
                    "dice_mean": _metric(record, label, "dice_mean"),
                    "hausdorff_mean": _metric(record, label, "hausdorff_mean"),
                }
            )
        for rep in config.representations:
            points = [r for r in rows if r["dataset"] == ds and r["representation"] == rep.tag]
            fit = fit_power_law([r["n_train"] for r in points], [r["dice_mean"] for r in points])
            fits.append(
                {"dataset": ds, "representation": rep.tag, **fit._asdict()}
            )
    files = [
        write_csv(
            out / "trainsize.csv",
            rows,
            ["dataset", "representation", "fraction", "n_train", "status", "dice_mean", "hausdorff_mean"],
        ),
        write_csv(
            out / "fit.csv",
            fits,
            ["dataset", "representation", "exponent", "prefactor", "n_points"],
        ),
    ]
    return SweepOutcome(records, files)


# --- cross-dataset evaluation ------------------------------------------------


def cmd_cross_eval(config: ExperimentConfig) -> SweepOutcome:
    """One model per (dataset, representation), scored on every dataset's test split."""
    targets = tuple(EvalTarget(ds, str(path), "test") for ds, path in config.datasets.items())
    grid = [(rep, ds) for rep in config.representations for ds in config.datasets]
    specs = [make_spec(config, ds, rep, evals=targets) for rep, ds in grid]
    records = _run(config, specs)
    rows = []
    for (rep, train_ds), record in zip(grid, records):
        for target in targets:
            rows.append(
                {
                    "representation": rep.tag,
                    "train_dataset": train_ds,
                    "test_dataset": target.dataset,
                    "status": record["status"],
                    "dice_mean": _metric(record, target.label, "dice_mean"),
                    "hausdorff_mean": _metric(record, target.label, "hausdorff_mean"),
                }
            )
    files = [
        write_csv(
            config.output / "cross_eval" / "matrix.csv",
            rows,
            ["representation", "train_dataset", "test_dataset", "status", "dice_mean", "hausdorff_mean"],
        )
    ]
    return SweepOutcome(records, files)


# --- compression ratio -------------------------------------------------------


def dataset_dims(manifest: DatasetManifest) -> tuple[int, ...]:
    if not len(manifest):
        raise ConfigError(f"Dataset '{manifest.name}' is empty")
    return tuple(read_sidecar(manifest.resolve(manifest.entries[0]))["dims"])


def cmd_compression_sweep(
    config: ExperimentConfig, latents: t.Sequence[int] = (32, 16, 8, 4, 2, 1)
) -> SweepOutcome:
    grid = [
        (ds, rep, z) for ds in config.datasets for rep in config.representations for z in latents
    ]
    dims = {ds: dataset_dims(config.manifest(ds)) for ds in config.datasets}
    specs = [
        make_spec(
            config,
            ds,
            rep,
            model_config=dataclasses.replace(config.model, latent_channels=z),
        )
        for ds, rep, z in grid
    ]
    records = _run(config, specs)
    rows = []
    for (ds, rep, z), record in zip(grid, records):
        mc = dataclasses.replace(config.model, latent_channels=z)
        rows.append(
            {
                "dataset": ds,
                "representation": rep.tag,
                "latent_channels": z,
                "compression_ratio": compression_ratio(mc, dims[ds]),
                "status": record["status"],
                "dice_mean": _metric(record, f"{ds}/test", "dice_mean"),
                "hausdorff_mean": _metric(record, f"{ds}/test", "hausdorff_mean"),
            }
        )
    files = [
        write_csv(
            config.output / "compression" / "compression.csv",
            rows,
            [
                "dataset",
                "representation",
                "latent_channels",
                "compression_ratio",
                "status",
                "dice_mean",
                "hausdorff_mean",
            ],
        )
    ]
    return SweepOutcome(records, files)


__all__ = [
    "PROFILES",
    "Profile",
    "ExperimentConfig",
    "GridSearchSpace",
    "RunSpec",
    "EvalTarget",
    "SweepOutcome",
    "execute_run",
    "run_all",
    "make_spec",
    "fit_power_law",
    "relative_performance",
    "cmd_repr_sweep",
    "cmd_grid_search",
    "cmd_uncertainty",
    "cmd_trainsize_sweep",
    "cmd_cross_eval",
    "cmd_compression_sweep",
]
