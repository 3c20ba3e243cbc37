"""Synthetic droplet datasets.

Each sample is a union of spheres with lognormal radii (in voxels). The
number of droplets is not drawn directly: a target volume fraction is drawn
uniformly from [0, 1] and droplets are added until it is reached, which
makes the achieved volume fraction (approximately) uniform.
"""

import dataclasses
import logging
import typing as t
from pathlib import Path

import numpy as np

from mpae.exceptions import ConfigError
from mpae.representation import signed_distance
from mpae.utils import atomic_write, derive_rng
from mpae.volume import (
    DEFAULT_RATIOS,
    DatasetManifest,
    ManifestEntry,
    PhaseMask,
    split_dataset,
    write_volume,
)

log = logging.getLogger(__name__)


@dataclasses.dataclass
class SynthConfig:
    """Generator parameters; ``mu`` and ``sigma`` describe log-radius in voxels."""

    mu: float
    sigma: float = 0.5
    grid: int = 64
    seed: int = 0
    max_droplets: int = 4096

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.grid < 8:
            raise ConfigError(f"grid must be at least 8, got {self.grid}")
        if self.max_droplets < 1:
            raise ConfigError(f"max_droplets must be at least 1, got {self.max_droplets}")


@dataclasses.dataclass(frozen=True)
class DropletSpec:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"Droplet radius must be positive, got {self.radius}")


@dataclasses.dataclass
class SyntheticSample:
    mask: PhaseMask
    droplets: list[DropletSpec]
    target_vf: float
    achieved_vf: float
    capped: bool = False


def sample_radius(rng: np.random.Generator, mu: float, sigma: float = 0.5) -> float:
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return float(np.exp(rng.normal(mu, sigma)))


def paint_sphere(data: np.ndarray, droplet: DropletSpec) -> int:
    """Set voxels whose centers lie inside the sphere; returns newly set voxels.

    Spheres are clipped by the domain boundary.
    """
    n = data.shape[0]
    center = np.asarray(droplet.center) * n
    r = droplet.radius
    lo = np.clip(np.floor(center - r - 0.5).astype(int), 0, n)
    hi = np.clip(np.ceil(center + r + 0.5).astype(int), 0, n)
    if np.any(hi <= lo):
        return 0
    axes = [np.arange(a, b) + 0.5 - c for a, b, c in zip(lo, hi, center)]
    dx, dy, dz = np.meshgrid(*axes, indexing="ij", sparse=True)
    inside = dx**2 + dy**2 + dz**2 <= r**2
    box = data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    added = int(np.count_nonzero(inside & ~box))
    box |= inside
    return added


def generate_sample(config: SynthConfig, rng: np.random.Generator) -> SyntheticSample:
    n = config.grid
    total = n**3
    target = float(rng.uniform(0.0, 1.0))
    data = np.zeros((n, n, n), dtype=bool)
    droplets: list[DropletSpec] = []
    filled = 0
    while True:
        center = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
        droplet = DropletSpec(center=center, radius=sample_radius(rng, config.mu, config.sigma))
        filled += paint_sphere(data, droplet)
        droplets.append(droplet)
        if filled / total >= target:
            break
        if len(droplets) >= config.max_droplets:
            break
    achieved = filled / total
    capped = achieved < target
    if capped:
        log.warning(
            f"max_droplets={config.max_droplets} reached at volume fraction "
            f"{achieved:.3f} < target {target:.3f}"
        )
    return SyntheticSample(PhaseMask(data), droplets, target, achieved, capped)


@dataclasses.dataclass
class DatasetStats:
    achieved_vf: list[float] = dataclasses.field(default_factory=list)
    droplet_counts: list[int] = dataclasses.field(default_factory=list)
    capped: int = 0

    def add(self, sample: SyntheticSample) -> None:
        self.achieved_vf.append(sample.achieved_vf)
        self.droplet_counts.append(len(sample.droplets))
        self.capped += int(sample.capped)

    def report(self, config: SynthConfig) -> str:
        counts, edges = np.histogram(self.achieved_vf, bins=10, range=(0.0, 1.0))
        lines = [
            f"synthetic dataset mu={config.mu} sigma={config.sigma} "
            f"grid={config.grid} seed={config.seed}",
            f"samples: {len(self.achieved_vf)}",
            f"capped samples (max_droplets={config.max_droplets}): {self.capped}",
            "droplets per sample: "
            f"mean {np.mean(self.droplet_counts):.2f} "
            f"min {min(self.droplet_counts)} max {max(self.droplet_counts)}",
            f"achieved volume fraction: mean {np.mean(self.achieved_vf):.4f}",
            "volume fraction histogram:",
        ]
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            lines.append(f"  [{lo:.1f}, {hi:.1f}) {int(c)}")
        return "\n".join(lines) + "\n"


def generate_dataset(
    config: SynthConfig,
    n_samples: int,
    out_dir: str | Path,
    ratios: t.Sequence[float] = DEFAULT_RATIOS,
    name: str | None = None,
) -> DatasetManifest:
    """Generate, redistance and write ``n_samples`` samples with an 80/15/5 split.

    Sample ``i`` draws from its own generator derived from ``(seed, i)``, so the
    output does not depend on generation order.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, got {n_samples}")
    out_dir = Path(out_dir)
    name = name or f"synth_mu{config.mu:g}"
    width = max(5, len(str(n_samples - 1)))
    stats = DatasetStats()
    entries = []
    for idx in range(n_samples):
        sample = generate_sample(config, derive_rng(config.seed, "sample", idx))
        stats.add(sample)
        sdf = signed_distance(sample.mask)
        sample_id = f"{name}_{idx:0{width}d}"
        rel = Path("volumes") / f"{sample_id}.f32"
        write_volume(sdf.grid, out_dir / rel, representation="sdf")
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                path=rel,
                representation="sdf",
                provenance="synthetic",
                meta={
                    "mu": config.mu,
                    "n_droplets": len(sample.droplets),
                    "target_vf": sample.target_vf,
                    "achieved_vf": sample.achieved_vf,
                    "capped": sample.capped,
                },
            )
        )
        log.debug(f"{sample_id}: {len(sample.droplets)} droplets, vf {sample.achieved_vf:.3f}")

    manifest = DatasetManifest(entries=entries, root=out_dir, name=name)
    manifest = split_dataset(manifest, ratios, derive_rng(config.seed, "split"))
    manifest.save(out_dir / "manifest.json")
    atomic_write(out_dir / "stats.txt", stats.report(config))
    log.info(f"wrote {n_samples} samples to {out_dir} ({manifest.sizes()})")
    return manifest
