"""Segmentation metrics, droplet size distributions and summary statistics.

All metrics work on binarized masks; distances are reported in domain units
(domain edge = 1 along the largest axis) and measured between voxel centers.
"""

import dataclasses
import logging
import math
import typing as t

import numpy as np
import scipy.ndimage
import scipy.spatial.distance
import scipy.stats

from mpae.abc import EvalRowTypedDict, HistogramRowTypedDict, SummaryRowTypedDict
from mpae.exceptions import DimensionError, EvaluationError, MPAEError, StatsError
from mpae.representation import InterfaceField, Representation, binarize, load_field
from mpae.volume import DatasetManifest, ManifestEntry, PhaseMask, VoxelGrid

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
EMPTY_PREDICTION = "empty_prediction"
EMPTY_TRUTH = "empty_truth"
HAUSDORFF_SENTINEL = "hausdorff_sentinel"

_SIX_NEIGHBOURS = [
    (axis, shift) for axis in range(3) for shift in (-1, 1)
]


class Reconstructor(t.Protocol):
    def reconstruct(self, x: np.ndarray) -> np.ndarray: ...


def _check_dims(x: PhaseMask, y: PhaseMask) -> None:
    if x.dims != y.dims:
        raise DimensionError(f"Mask dims differ: {x.dims} vs {y.dims}")


def dice(x: PhaseMask, y: PhaseMask) -> float:
    _check_dims(x, y)
    total = x.count() + y.count()
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(x.data & y.data) / total


def interface_mask(mask: PhaseMask) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    Out-of-domain neighbours count as foreground, so the domain boundary
    does not create interface.
    """
    padded = np.pad(mask.data, 1, mode="constant", constant_values=True)
    core = (slice(1, -1),) * 3
    touches_background = np.zeros(mask.dims, dtype=bool)
    for axis, shift in _SIX_NEIGHBOURS:
        touches_background |= ~np.roll(padded, shift, axis=axis)[core]
    return mask.data & touches_background


def interface_voxels(mask: PhaseMask) -> np.ndarray:
    """Indices (k, 3) of the interface voxels, in C order."""
    return np.argwhere(interface_mask(mask))


class HausdorffResult(t.NamedTuple):
    distance: float
    sentinel: bool


def _directed_edt(source: np.ndarray, target: np.ndarray) -> float:
    # distance (in voxels) from each voxel to the nearest target voxel
    distance = scipy.ndimage.distance_transform_edt(~target)
    return float(distance[source].max())


def _directed_pairwise(source: np.ndarray, target: np.ndarray) -> float:
    d = scipy.spatial.distance.cdist(
        np.argwhere(source).astype(float), np.argwhere(target).astype(float)
    )
    return float(d.min(axis=1).max())


def hausdorff_detail(
    x: PhaseMask,
    y: PhaseMask,
    method: t.Literal["edt", "pairwise"] = "edt",
) -> HausdorffResult:
    _check_dims(x, y)
    if method == "edt":
        directed = _directed_edt
    elif method == "pairwise":
        directed = _directed_pairwise
    else:
        raise ValueError(f"Unknown Hausdorff method '{method}'")
    gx = interface_mask(x)
    gy = interface_mask(y)
    empty_x, empty_y = not gx.any(), not gy.any()
    if empty_x and empty_y:
        return HausdorffResult(0.0, False)
    if empty_x or empty_y:
        return HausdorffResult(SQRT3, True)
    voxels = max(directed(gx, gy), directed(gy, gx))
    return HausdorffResult(voxels * x.spacing, False)


def hausdorff(
    x: PhaseMask, y: PhaseMask, method: t.Literal["edt", "pairwise"] = "edt"
) -> float:
    """Symmetric Hausdorff distance between the interface voxel sets.

    One-sided empty interfaces give the domain diagonal (sqrt(3)).
    """
    return hausdorff_detail(x, y, method).distance


def default_bins(dims: t.Sequence[int], n_bins: int = 16) -> np.ndarray:
    """Log-spaced diameter bin edges (voxels) from 1 up to the whole domain."""
    largest = 2.0 * (3.0 * math.prod(dims) / (4.0 * math.pi)) ** (1 / 3)
    return np.geomspace(1.0, largest * (1 + 1e-9), n_bins + 1)


def equivalent_diameter(volume: np.ndarray | float) -> np.ndarray:
    return 2.0 * (3.0 * np.asarray(volume, dtype=float) / (4.0 * math.pi)) ** (1 / 3)


@dataclasses.dataclass
class DropletHistogram:
    volumes: np.ndarray
    bin_edges: np.ndarray

    @property
    def diameters(self) -> np.ndarray:
        return equivalent_diameter(self.volumes)

    @property
    def counts(self) -> np.ndarray:
        return np.histogram(self.diameters, bins=self.bin_edges)[0]

    @property
    def n_components(self) -> int:
        return len(self.volumes)


def droplet_size_distribution(
    mask: PhaseMask, bin_edges: np.ndarray | None = None
) -> DropletHistogram:
    """Connected components (26-connectivity) with their volumes in voxels."""
    if bin_edges is None:
        bin_edges = default_bins(mask.dims)
    structure = scipy.ndimage.generate_binary_structure(3, 3)
    labels, n = scipy.ndimage.label(mask.data, structure=structure)
    volumes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return DropletHistogram(volumes=volumes, bin_edges=np.asarray(bin_edges))


def histogram_rows(
    truth: np.ndarray, prediction: np.ndarray, bin_edges: np.ndarray
) -> list[HistogramRowTypedDict]:
    return [
        {
            "bin_lo": float(lo),
            "bin_hi": float(hi),
            "count_truth": int(ct),
            "count_pred": int(cp),
        }
        for lo, hi, ct, cp in zip(bin_edges[:-1], bin_edges[1:], truth, prediction)
    ]


@dataclasses.dataclass
class SummaryStats:
    mean: float
    std: float
    ci_lo: float
    ci_hi: float
    n: int

    @classmethod
    def from_moments(
        cls, mean: float, std: float, n: int, confidence: float = 0.95
    ) -> "SummaryStats":
        """Student-t interval ``mean +- t_{(1+c)/2, n-1} * std / sqrt(n)``."""
        if n < 2:
            raise StatsError(f"A confidence interval needs n >= 2, got n={n}")
        if std < 0 or not math.isfinite(mean) or not math.isfinite(std):
            raise StatsError(f"Invalid moments mean={mean}, std={std}")
        half = scipy.stats.t.ppf((1 + confidence) / 2, n - 1) * std / math.sqrt(n)
        return cls(float(mean), float(std), float(mean - half), float(mean + half), n)

    def row(self, representation: str, metric: str) -> SummaryRowTypedDict:
        return {
            "representation": representation,
            "metric": metric,
            "mean": self.mean,
            "std": self.std,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
        }


def summarize(values: t.Sequence[float], confidence: float = 0.95) -> SummaryStats:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise StatsError(f"summarize needs at least 2 values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise StatsError("summarize got non-finite values")
    mean = float(values.mean())
    # identical values must give an exact zero
    std = 0.0 if np.all(values == values[0]) else float(values.std(ddof=1))
    return SummaryStats.from_moments(mean, std, int(values.size), confidence)


@dataclasses.dataclass
class EvalResult:
    sample_id: str
    dice: float
    hausdorff_norm: float
    flags: tuple[str, ...] = ()

    def row(self) -> EvalRowTypedDict:
        return {
            "sample_id": self.sample_id,
            "dice": self.dice,
            "hausdorff_norm": self.hausdorff_norm,
            "flags": "|".join(self.flags),
        }


def compare(
    sample_id: str, truth: PhaseMask, prediction: PhaseMask
) -> EvalResult:
    flags = []
    if prediction.count() == 0:
        flags.append(EMPTY_PREDICTION)
    if truth.count() == 0:
        flags.append(EMPTY_TRUTH)
    hd = hausdorff_detail(prediction, truth)
    if hd.sentinel:
        flags.append(HAUSDORFF_SENTINEL)
    return EvalResult(sample_id, dice(prediction, truth), hd.distance, tuple(flags))


@dataclasses.dataclass
class EvaluationReport:
    representation: Representation
    results: list[EvalResult]
    bin_edges: np.ndarray
    counts_truth: np.ndarray
    counts_pred: np.ndarray

    @property
    def dice_values(self) -> list[float]:
        return [r.dice for r in self.results]

    @property
    def hausdorff_values(self) -> list[float]:
        return [r.hausdorff_norm for r in self.results]

    @property
    def dice_mean(self) -> float:
        return float(np.mean(self.dice_values)) if self.results else float("nan")

    @property
    def hausdorff_mean(self) -> float:
        return float(np.mean(self.hausdorff_values)) if self.results else float("nan")

    def summary(self, metric: t.Literal["dice", "hausdorff_norm"]) -> SummaryStats | None:
        values = self.dice_values if metric == "dice" else self.hausdorff_values
        if len(values) < 2:
            return None
        return summarize(values)

    def rows(self) -> list[EvalRowTypedDict]:
        return [r.row() for r in self.results]

    def histogram_rows(self) -> list[HistogramRowTypedDict]:
        return histogram_rows(self.counts_truth, self.counts_pred, self.bin_edges)


def evaluate(
    model: Reconstructor,
    manifest: DatasetManifest,
    representation: Representation | str,
    split: str = "test",
    entries: t.Sequence[ManifestEntry] | None = None,
) -> EvaluationReport:
    """Reconstruct every sample of ``split`` and score the binarized output.

    Inputs are derived from the stored fields in ``representation``; truth and
    prediction are both binarized with ``representation.binarize``.
    """
    representation = Representation.parse(representation)
    entries = manifest.split(split) if entries is None else list(entries)
    results = []
    bin_edges = None
    counts_truth = counts_pred = None
    for entry in entries:
        try:
            field = load_field(manifest, entry, representation)
            prediction = InterfaceField(
                VoxelGrid(model.reconstruct(field.grid.data)), representation
            )
            truth_mask = binarize(field)
            pred_mask = binarize(prediction)
            results.append(compare(entry.sample_id, truth_mask, pred_mask))
        except (MPAEError, OSError, ValueError) as err:
            raise EvaluationError(entry.sample_id, str(err)) from err
        if bin_edges is None:
            bin_edges = default_bins(truth_mask.dims)
            counts_truth = np.zeros(len(bin_edges) - 1, dtype=int)
            counts_pred = np.zeros(len(bin_edges) - 1, dtype=int)
        counts_truth += droplet_size_distribution(truth_mask, bin_edges).counts
        counts_pred += droplet_size_distribution(pred_mask, bin_edges).counts
    if bin_edges is None:
        log.warning(f"No samples in split '{split}' of '{manifest.name}'")
        bin_edges = np.zeros(1)
        counts_truth = counts_pred = np.zeros(0, dtype=int)
    report = EvaluationReport(representation, results, bin_edges, counts_truth, counts_pred)
    log.info(
        f"{representation.label} on {manifest.name}/{split}: "
        f"dice {report.dice_mean:.4f}, hausdorff {report.hausdorff_mean:.4f} "
        f"({len(results)} samples)"
    )
    return report
