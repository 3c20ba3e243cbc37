"""Conversions between signed-distance, diffuse (tanh) and sharp interface fields.

Sign convention: phase 1 is inside, ``s < 0`` there, and both the tanh and
the sharp field are 1 inside phase 1. Distances are in domain units
(domain edge = 1 along the largest axis).
"""

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import scipy.ndimage
import znjson

from mpae.abc import RepresentationKind
from mpae.exceptions import ConfigError, RepresentationError
from mpae.utils import format_fraction, parse_number
from mpae.volume import (
    DatasetManifest,
    ManifestEntry,
    PhaseMask,
    VoxelGrid,
    read_sidecar,
    read_volume,
)

log = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
DIFFUSE_TOLERANCE = 0.05


@dataclasses.dataclass(frozen=True)
class Representation:
    kind: RepresentationKind
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in ("sdf", "tanh", "sharp"):
            raise ConfigError(f"Unknown representation kind '{self.kind}'")
        if self.kind == "tanh":
            if self.epsilon is None or not self.epsilon > 0:
                raise ConfigError(
                    f"Tanh representation needs epsilon > 0, got {self.epsilon}"
                )
        elif self.epsilon is not None:
            raise ConfigError(f"Representation '{self.kind}' takes no epsilon")

    @classmethod
    def parse(cls, tag: "str | Representation") -> "Representation":
        """Parse ``sdf``, ``sharp``, ``tanh:1/32`` or ``tanh:0.03125``."""
        if isinstance(tag, Representation):
            return tag
        kind, _, eps = tag.strip().lower().partition(":")
        if kind == "tanh":
            if not eps:
                raise ConfigError(f"Tanh tag '{tag}' lacks an epsilon, e.g. tanh:1/32")
            try:
                return cls("tanh", parse_number(eps))
            except (ValueError, ZeroDivisionError) as err:
                raise ConfigError(f"Invalid epsilon in tag '{tag}'") from err
        if eps:
            raise ConfigError(f"Representation '{kind}' takes no epsilon: '{tag}'")
        return cls(kind)

    @property
    def tag(self) -> str:
        if self.kind == "tanh":
            return f"tanh:{format_fraction(self.epsilon)}"
        return self.kind

    @property
    def label(self) -> str:
        if self.kind == "tanh":
            return f"Tanh {format_fraction(self.epsilon)}"
        return {"sdf": "SDF", "sharp": "Sharp"}[self.kind]

    def __str__(self):
        return self.tag


SDF = Representation("sdf")
SHARP = Representation("sharp")
DEFAULT_SWEEP = (
    SDF,
    SHARP,
    Representation("tanh", 1 / 128),
    Representation("tanh", 1 / 32),
    Representation("tanh", 1 / 8),
)


class RepresentationConverter(znjson.ConverterBase):
    level = 100
    representation = "mpae.Representation"
    instance = Representation

    def encode(self, obj: Representation) -> str:
        return obj.tag

    def decode(self, value: str) -> Representation:
        return Representation.parse(value)


@dataclasses.dataclass
class InterfaceField:
    grid: VoxelGrid
    kind: Representation

    def validate(self) -> None:
        """Check the value invariants of the tagged representation."""
        data = self.grid.data
        if self.kind.kind == "sdf":
            h = self.grid.spacing
            magnitude = np.abs(data)
            if magnitude.max() > SQRT3 + 1e-6:
                raise RepresentationError("SDF magnitude exceeds the domain diagonal")
            if magnitude.min() < h / 2 - 1e-6:
                raise RepresentationError("SDF has a voxel closer than h/2 to the zero level")
        else:
            if data.min() < 0 or data.max() > 1:
                raise RepresentationError(f"{self.kind.label} values leave [0, 1]")
            if self.kind.kind == "sharp" and not np.all(np.isin(data, (0.0, 0.5, 1.0))):
                raise RepresentationError("Sharp values must be in {0, 0.5, 1}")


def edt(mask: PhaseMask) -> VoxelGrid | None:
    """Exact Euclidean distance from each voxel center to the nearest true voxel.

    Returns ``None`` when the mask has no true voxels.
    """
    if not mask.data.any():
        return None
    distance = scipy.ndimage.distance_transform_edt(~mask.data, sampling=mask.spacing)
    return VoxelGrid(distance)


def signed_distance(mask: PhaseMask) -> InterfaceField:
    h = mask.spacing
    to_foreground = edt(mask)
    to_background = edt(mask.complement())
    if to_foreground is None:
        data = np.full(mask.dims, SQRT3)
    elif to_background is None:
        data = np.full(mask.dims, -SQRT3)
    else:
        data = np.where(
            mask.data,
            -(to_background.data - h / 2),
            to_foreground.data - h / 2,
        )
    return InterfaceField(VoxelGrid(data), SDF)


def _require_sdf(field: InterfaceField) -> None:
    if field.kind.kind != "sdf":
        raise RepresentationError(
            f"Expected an SDF field, got {field.kind.label}; use convert() instead"
        )


def to_tanh(sdf: InterfaceField, epsilon: float) -> InterfaceField:
    if not epsilon > 0:
        raise ConfigError(f"Interface thickness must be positive, got {epsilon}")
    _require_sdf(sdf)
    phi = (1.0 + np.tanh(-sdf.grid.data / (2.0 * epsilon))) / 2.0
    return InterfaceField(VoxelGrid(phi), Representation("tanh", epsilon))


def to_sharp(sdf: InterfaceField) -> InterfaceField:
    _require_sdf(sdf)
    indicator = (1.0 - np.sign(sdf.grid.data)) / 2.0
    return InterfaceField(VoxelGrid(indicator), SHARP)


def binarize(field: InterfaceField) -> PhaseMask:
    if field.kind.kind == "sdf":
        return PhaseMask(field.grid.data < 0)
    return PhaseMask(field.grid.data >= 0.5)


def check_diffuse_range(grid: VoxelGrid, source: str = "Diffuse field") -> None:
    if np.isnan(grid.data).any():
        raise RepresentationError(f"{source} contains NaN values")
    low, high = float(grid.data.min()), float(grid.data.max())
    if low < -DIFFUSE_TOLERANCE or high > 1 + DIFFUSE_TOLERANCE:
        raise RepresentationError(
            f"{source} values must lie in [{-DIFFUSE_TOLERANCE}, "
            f"{1 + DIFFUSE_TOLERANCE}], got [{low:g}, {high:g}]"
        )


def from_diffuse(grid: VoxelGrid) -> InterfaceField:
    """Recover an SDF from a diffuse phase field by thresholding at 0.5."""
    check_diffuse_range(grid)
    return signed_distance(PhaseMask(grid.data >= 0.5))


def convert(field: InterfaceField, target: Representation | str) -> InterfaceField:
    """Derive ``target`` from any representation.

    Non-SDF inputs are binarized and redistanced first; sub-voxel interface
    positions are not recovered.
    """
    target = Representation.parse(target)
    if field.kind == target:
        return field
    sdf = field if field.kind.kind == "sdf" else signed_distance(binarize(field))
    if target.kind == "sdf":
        return sdf
    if target.kind == "sharp":
        return to_sharp(sdf)
    return to_tanh(sdf, target.epsilon)


def read_field(path: str | Path) -> InterfaceField:
    header = read_sidecar(path)
    kind = Representation(header["representation"], header.get("epsilon"))
    return InterfaceField(read_volume(path), kind)


def load_field(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    target: Representation | str | None = None,
) -> InterfaceField:
    field = read_field(manifest.resolve(entry))
    if target is None:
        return field
    return convert(field, target)
