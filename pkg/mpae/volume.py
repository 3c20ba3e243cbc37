"""Voxel grids, phase masks, patches, dataset manifests and the volume file format.

Volumes are stored as raw little-endian float32 payloads in x-fastest order
with a JSON sidecar next to them (``<path>.json``). Arrays are held in memory
with shape ``(nx, ny, nz)``; x-fastest on disk is Fortran order.
"""

import dataclasses
import json
import logging
import math
import typing as t
from pathlib import Path

import numpy as np
import znjson

from mpae.abc import Provenance, RepresentationKind, SidecarTypedDict, Split
from mpae.exceptions import ConfigError, DimensionError, FormatError
from mpae.utils import atomic_write

log = logging.getLogger(__name__)

SPLITS: tuple[Split, ...] = ("train", "test", "val")
DEFAULT_RATIOS = (0.80, 0.15, 0.05)
MANIFEST_VERSION = 1


@dataclasses.dataclass
class VoxelGrid:
    """Dense scalar field on a uniform cubic grid.

    The domain edge is 1 along the largest axis, so ``h = 1 / max(dims)``.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(
                f"VoxelGrid needs a 3D array with positive dims, got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise FormatError("VoxelGrid values must be finite (no NaN/Inf)")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(x) for x in self.data.shape)

    @property
    def spacing(self) -> float:
        return 1.0 / max(self.dims)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @classmethod
    def from_flat(cls, values: np.ndarray, dims: t.Sequence[int]) -> "VoxelGrid":
        values = np.asarray(values)
        if values.size != math.prod(dims):
            raise DimensionError(
                f"Expected {math.prod(dims)} values for dims {tuple(dims)}, got {values.size}"
            )
        return cls(values.reshape(tuple(dims), order="F"))

    def flat(self) -> np.ndarray:
        """Values in x-fastest order."""
        return self.data.ravel(order="F")


@dataclasses.dataclass
class PhaseMask:
    """Per-voxel phase indicator, ``True`` marks phase 1 (droplet)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise DimensionError(f"PhaseMask needs a 3D array, got {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(x) for x in self.data.shape)

    @property
    def spacing(self) -> float:
        return 1.0 / max(self.dims)

    def complement(self) -> "PhaseMask":
        return PhaseMask(~self.data)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def to_grid(self) -> VoxelGrid:
        return VoxelGrid(self.data.astype(np.float32))


def volume_fraction(mask: PhaseMask) -> float:
    count, size = mask.count(), mask.data.size
    # the majority phase is 1 - minority, so a mask and its complement sum to exactly 1.0
    if 2 * count > size:
        return 1.0 - (size - count) / size
    return count / size


@dataclasses.dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    size: int = 64

    def fits(self, dims: t.Sequence[int]) -> bool:
        return all(
            0 <= o and o + self.size <= d for o, d in zip(self.origin, dims)
        )

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.size) for o in self.origin)


class Patch(t.NamedTuple):
    spec: PatchSpec
    grid: VoxelGrid


def is_single_phase(grid: VoxelGrid, empty_threshold: float = 0.01) -> bool:
    return bool(
        grid.data.max() < empty_threshold or grid.data.min() > 1 - empty_threshold
    )


def extract_patches(
    volume: VoxelGrid,
    patch_size: int = 64,
    count: int = 64,
    empty_threshold: float = 0.01,
    rng: np.random.Generator | None = None,
) -> list[Patch]:
    """Cut ``count`` randomly placed cubes out of a diffuse field.

    Patch locations may overlap. Patches that are single-phase under
    ``empty_threshold`` are discarded, so fewer than ``count`` may return.
    """
    if any(patch_size > d for d in volume.dims):
        raise DimensionError(
            f"Patch size {patch_size} exceeds volume dims {volume.dims}"
        )
    if rng is None:
        rng = np.random.default_rng()
    high = [d - patch_size + 1 for d in volume.dims]
    patches = []
    for _ in range(count):
        origin = tuple(int(rng.integers(0, h)) for h in high)
        spec = PatchSpec(origin=origin, size=patch_size)
        grid = VoxelGrid(volume.data[spec.slices()].copy())
        if is_single_phase(grid, empty_threshold):
            continue
        patches.append(Patch(spec, grid))
    log.debug(f"kept {len(patches)} of {count} patches")
    return patches


# --- volume file format ---------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_volume(
    grid: VoxelGrid,
    path: str | Path,
    representation: RepresentationKind = "sdf",
    epsilon: float | None = None,
) -> Path:
    path = Path(path)
    header: SidecarTypedDict = {
        "dims": list(grid.dims),
        "dtype": "f32",
        "representation": representation,
        "epsilon": epsilon,
        "byte_order": "le",
    }
    atomic_write(path, grid.flat().astype("<f4").tobytes())
    atomic_write(sidecar_path(path), json.dumps(header, sort_keys=True, indent=2))
    return path


def read_sidecar(path: str | Path) -> SidecarTypedDict:
    try:
        header = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError as err:
        raise FormatError(f"Missing sidecar for volume '{path}'") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"Malformed sidecar for volume '{path}': {err}") from err

    for key in ("dims", "dtype", "representation", "byte_order"):
        if key not in header:
            raise FormatError(f"Sidecar of '{path}' lacks field '{key}'")
    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise FormatError(f"Sidecar of '{path}' has invalid dims {dims!r}")
    if header["dtype"] != "f32":
        raise FormatError(f"Unknown dtype '{header['dtype']}' in '{path}'")
    if header["byte_order"] != "le":
        raise FormatError(f"Unknown byte order '{header['byte_order']}' in '{path}'")
    if header["representation"] not in ("sdf", "tanh", "sharp"):
        raise FormatError(
            f"Unknown representation '{header['representation']}' in '{path}'"
        )
    header.setdefault("epsilon", None)
    return header


def read_volume(path: str | Path) -> VoxelGrid:
    header = read_sidecar(path)
    dims = header["dims"]
    payload = Path(path).read_bytes()
    expected = 4 * math.prod(dims)
    if len(payload) != expected:
        raise FormatError(
            f"Length mismatch in '{path}': dims {dims} need {expected // 4} values, "
            f"payload holds {len(payload) / 4:g}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"Volume '{path}' contains non-finite values")
    return VoxelGrid.from_flat(values, dims)


def write_mask(mask: PhaseMask, path: str | Path) -> Path:
    return write_volume(mask.to_grid(), path, representation="sharp")


def read_mask(path: str | Path) -> PhaseMask:
    return PhaseMask(read_volume(path).data >= 0.5)


# --- manifests ------------------------------------------------------------


@dataclasses.dataclass
class ManifestEntry:
    sample_id: str
    path: Path
    representation: RepresentationKind = "sdf"
    epsilon: float | None = None
    provenance: Provenance = "synthetic"
    split: Split | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.path = Path(self.path)


class ManifestEntryConverter(znjson.ConverterBase):
    level = 100
    representation = "mpae.ManifestEntry"
    instance = ManifestEntry

    def encode(self, obj: ManifestEntry) -> dict:
        return {
            "sample_id": obj.sample_id,
            "path": obj.path.as_posix(),
            "representation": obj.representation,
            "epsilon": obj.epsilon,
            "provenance": obj.provenance,
            "split": obj.split,
            "meta": obj.meta,
        }

    def decode(self, value: dict) -> ManifestEntry:
        return ManifestEntry(**{**value, "path": Path(value["path"])})


@dataclasses.dataclass
class DatasetManifest:
    """List of samples with their split assignment.

    Entry paths are relative to ``root`` (the directory holding the manifest).
    """

    entries: list[ManifestEntry] = dataclasses.field(default_factory=list)
    root: Path = dataclasses.field(default_factory=Path)
    name: str = "dataset"

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.sample_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ConfigError(f"Duplicate sample ids in manifest '{self.name}'")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> t.Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: Split) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def to_json(self) -> str:
        data = {"version": MANIFEST_VERSION, "name": self.name, "entries": self.entries}
        return json.dumps(
            data,
            cls=znjson.ZnEncoder.from_converters([ManifestEntryConverter]),
            indent=2,
            allow_nan=False,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        self.root = path.parent
        return atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(
                path.read_text(),
                cls=znjson.ZnDecoder.from_converters([ManifestEntryConverter]),
            )
        except FileNotFoundError as err:
            raise ConfigError(f"Manifest '{path}' does not exist") from err
        except (json.JSONDecodeError, TypeError, KeyError) as err:
            raise FormatError(f"Malformed manifest '{path}': {err}") from err
        if data.get("version") != MANIFEST_VERSION:
            raise FormatError(f"Unsupported manifest version in '{path}'")
        return cls(entries=data["entries"], root=path.parent, name=data["name"])


def split_sizes(n: int, ratios: t.Sequence[float] = DEFAULT_RATIOS) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    if len(ratios) != len(SPLITS):
        raise ConfigError(f"Expected {len(SPLITS)} split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"Split ratios must be non-negative and sum to 1, got {ratios}")
    quotas = [r * n for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    remainders = sorted(
        range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i)
    )
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(
    manifest: DatasetManifest,
    ratios: t.Sequence[float] = DEFAULT_RATIOS,
    rng: np.random.Generator | None = None,
) -> DatasetManifest:
    """Assign train/test/val splits.

    Entries are ordered by sample id before shuffling, so the assignment
    depends only on the set of ids and the generator state.
    """
    sizes = split_sizes(len(manifest), ratios)
    if rng is None:
        rng = np.random.default_rng(0)
    ordered = sorted(manifest.entries, key=lambda e: e.sample_id)
    order = rng.permutation(len(ordered))
    labels = [s for s, size in zip(SPLITS, sizes) for _ in range(size)]
    assignment = {ordered[idx].sample_id: labels[pos] for pos, idx in enumerate(order)}
    entries = [
        dataclasses.replace(e, split=assignment[e.sample_id]) for e in manifest.entries
    ]
    return DatasetManifest(entries=entries, root=manifest.root, name=manifest.name)
