"""Collect experiment outputs into a report directory.

The file set depends only on the inputs: tables are copied byte for byte,
plots are rendered with a fixed SVG hash salt and no date metadata.
"""

import dataclasses
import logging
import math
import shutil
import typing as t
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mpae.utils import atomic_write, read_csv, slug  # noqa: E402
from mpae.volume import PhaseMask, read_mask  # noqa: E402

log = logging.getLogger(__name__)

TABLES = (
    "repr_sweep/summary.csv",
    "repr_sweep/repr_sweep.csv",
    "repr_sweep/relative_performance.csv",
    "repr_sweep/examples.csv",
    "grid_search/ranking.csv",
    "grid_search/top5.csv",
    "grid_search/parallel_coordinates.csv",
    "grid_search/loss_comparison.csv",
    "trainsize/trainsize.csv",
    "trainsize/fit.csv",
    "cross_eval/matrix.csv",
    "compression/compression.csv",
)

NOTE = (
    "Hausdorff distances are measured between interface voxel centers of the "
    "binarized masks and normalized by the domain edge."
)


@dataclasses.dataclass
class ReportOutcome:
    out: Path
    files: list[Path] = dataclasses.field(default_factory=list)
    missing: list[str] = dataclasses.field(default_factory=list)


def _float(value: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float("nan")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "mpae", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_repr_sweep(rows: list[dict], path: Path) -> Path:
    datasets = sorted({r["dataset"] for r in rows})
    reps = list(dict.fromkeys(r["representation"] for r in rows))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.8 / max(len(reps), 1)
    x = np.arange(len(datasets))
    for i, rep in enumerate(reps):
        lookup = {r["dataset"]: r for r in rows if r["representation"] == rep}
        for ax, key in zip(axes, ("dice_mean", "hausdorff_mean")):
            values = [_float(lookup[d][key]) if d in lookup else math.nan for d in datasets]
            ax.bar(x + i * width, values, width, label=rep)
    for ax, title in zip(axes, ("Dice", "Hausdorff (normalized)")):
        ax.set_xticks(x + 0.4 - width / 2, datasets)
        ax.set_title(title)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_parallel_coordinates(rows: list[dict], path: Path) -> Path:
    axes_names = ["loss", "lr", "weight_decay", "activation", "dice"]
    encoded = []
    for name in axes_names[:-1]:
        levels = sorted({r[name] for r in rows})
        encoded.append([levels.index(r[name]) / max(len(levels) - 1, 1) for r in rows])
    encoded.append([_float(r["dice"]) for r in rows])
    data = np.array(encoded).T
    fig, ax = plt.subplots(figsize=(8, 4))
    cmap = plt.get_cmap("viridis")
    for line in data:
        ax.plot(range(len(axes_names)), line, color=cmap(np.nan_to_num(line[-1])), alpha=0.7)
    ax.set_xticks(range(len(axes_names)), axes_names)
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    return _save(fig, path)


def plot_trainsize(rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in dict.fromkeys((r["dataset"], r["representation"]) for r in rows):
        points = [r for r in rows if (r["dataset"], r["representation"]) == key]
        n = [_float(r["n_train"]) for r in points]
        err = [1 - _float(r["dice_mean"]) for r in points]
        ax.plot(n, err, marker="o", label=" ".join(key))
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("training samples")
    ax.set_ylabel("1 - dice")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_cross_eval(rows: list[dict], path: Path) -> Path:
    reps = list(dict.fromkeys(r["representation"] for r in rows))
    datasets = sorted({r["train_dataset"] for r in rows} | {r["test_dataset"] for r in rows})
    fig, axes = plt.subplots(1, len(reps), figsize=(3.5 * len(reps), 3.5), squeeze=False)
    for ax, rep in zip(axes[0], reps):
        matrix = np.full((len(datasets), len(datasets)), np.nan)
        for r in rows:
            if r["representation"] == rep:
                i = datasets.index(r["train_dataset"])
                j = datasets.index(r["test_dataset"])
                matrix[i, j] = _float(r["dice_mean"])
        ax.imshow(matrix, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(datasets)), datasets, rotation=45)
        ax.set_yticks(range(len(datasets)), datasets)
        ax.set_title(rep)
    fig.tight_layout()
    return _save(fig, path)


def plot_compression(rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in dict.fromkeys((r["dataset"], r["representation"]) for r in rows):
        points = [r for r in rows if (r["dataset"], r["representation"]) == key]
        ax.plot(
            [_float(r["compression_ratio"]) for r in points],
            [_float(r["dice_mean"]) for r in points],
            marker="o",
            label=" ".join(key),
        )
    ax.set_xscale("log")
    ax.set_xlabel("compression ratio")
    ax.set_ylabel("dice")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def vtk_text(mask: PhaseMask, title: str = "phase mask") -> str:
    """Legacy-VTK ASCII structured points, x varying fastest."""
    nx, ny, nz = mask.dims
    h = mask.spacing
    values = mask.data.astype(np.uint8).ravel(order="F")
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN 0 0 0",
        f"SPACING {h!r} {h!r} {h!r}",
        f"POINT_DATA {values.size}",
        "SCALARS phase unsigned_char 1",
        "LOOKUP_TABLE default",
    ]
    lines.extend(" ".join(map(str, row)) for row in values.reshape(-1, nx))
    return "\n".join(lines) + "\n"


def export_vtk(mask: PhaseMask, path: str | Path, title: str = "phase mask") -> Path:
    return atomic_write(path, vtk_text(mask, title))


PLOTS: dict[str, tuple[str, t.Callable[[list[dict], Path], Path]]] = {
    "repr_sweep/summary.csv": ("repr_sweep.svg", plot_repr_sweep),
    "grid_search/parallel_coordinates.csv": ("grid_search.svg", plot_parallel_coordinates),
    "trainsize/trainsize.csv": ("trainsize.svg", plot_trainsize),
    "cross_eval/matrix.csv": ("cross_eval.svg", plot_cross_eval),
    "compression/compression.csv": ("compression.svg", plot_compression),
}


def build_report(results: str | Path, out: str | Path | None = None, plots: bool = True) -> ReportOutcome:
    """Copy tables, render plots and export example masks found under ``results``.

    Missing inputs are listed in ``index.txt``; whatever exists is still reported.
    """
    results = Path(results)
    outcome = ReportOutcome(Path(out) if out is not None else results / "report")
    tables = outcome.out / "tables"

    present = {}
    for rel in TABLES:
        source = results / rel
        if not source.is_file():
            outcome.missing.append(rel)
            continue
        target = tables / rel.replace("/", "_")
        atomic_write(target, source.read_bytes())
        outcome.files.append(target)
        present[rel] = source
    for source in sorted((results / "uncertainty").glob("*.csv")):
        target = tables / f"uncertainty_{source.name}"
        atomic_write(target, source.read_bytes())
        outcome.files.append(target)
    if not (results / "uncertainty").is_dir():
        outcome.missing.append("uncertainty/*.csv")

    if plots:
        for rel, (name, plot) in PLOTS.items():
            if rel in present:
                rows = read_csv(present[rel])
                if rows:
                    outcome.files.append(plot(rows, outcome.out / "plots" / name))

    if "repr_sweep/examples.csv" in present:
        for row in read_csv(present["repr_sweep/examples.csv"]):
            source = results / row["file"]
            if not source.is_file():
                outcome.missing.append(row["file"])
                continue
            name = f"{slug(row['dataset'])}_{slug(row['representation'])}_{Path(row['file']).stem}.vtk"
            outcome.files.append(
                export_vtk(
                    read_mask(source),
                    outcome.out / "vtk" / name,
                    f"{row['dataset']} {row['representation']} {Path(row['file']).stem}",
                )
            )

    index = outcome.out / "index.txt"
    lines = ["files:"]
    lines += [f"  {p.relative_to(outcome.out).as_posix()}" for p in outcome.files]
    lines += ["missing:"] + [f"  {m}" for m in outcome.missing]
    lines += ["note:", f"  {NOTE}"]
    atomic_write(index, "\n".join(lines) + "\n")
    outcome.files.append(index)
    log.info(
        f"report in {outcome.out}: {len(outcome.files)} files, {len(outcome.missing)} missing inputs"
    )
    return outcome
