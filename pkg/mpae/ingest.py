"""Turn directories of simulated diffuse-field volumes into SDF patch datasets."""

import logging
import shutil
import tempfile
import typing as t
from pathlib import Path

from mpae.exceptions import ConfigError
from mpae.representation import check_diffuse_range, from_diffuse
from mpae.utils import derive_rng
from mpae.volume import (
    DEFAULT_RATIOS,
    DatasetManifest,
    ManifestEntry,
    extract_patches,
    read_volume,
    split_dataset,
    write_volume,
)

log = logging.getLogger(__name__)


def _check_output(out_dir: Path, overwrite: bool) -> None:
    if not out_dir.exists():
        return
    if not out_dir.is_dir():
        raise ConfigError(f"Output path '{out_dir}' exists and is not a directory")
    if not any(out_dir.iterdir()):
        return
    if not (out_dir / "manifest.json").is_file():
        raise ConfigError(f"Refusing to replace '{out_dir}': not empty and not a dataset directory")
    if not overwrite:
        raise ConfigError(f"Dataset '{out_dir}' already exists; pass overwrite to replace it")


def ingest_diffuse_volumes(
    source: str | Path,
    epsilon_sim: float,
    out_dir: str | Path,
    patch_size: int = 64,
    count: int = 64,
    empty_threshold: float = 0.01,
    seed: int = 0,
    ratios: t.Sequence[float] = DEFAULT_RATIOS,
    name: str = "ingested",
    overwrite: bool = False,
) -> DatasetManifest:
    """Extract patches from every ``*.f32`` volume in ``source`` and store them as SDFs.

    All volumes are read and converted before anything is written; the output
    directory is populated by a single rename, so a failure leaves no partial
    dataset behind. An existing ``out_dir`` is only replaced when it is empty,
    or when it holds a previous dataset and ``overwrite`` is set.
    """
    source = Path(source)
    out_dir = Path(out_dir)
    _check_output(out_dir, overwrite)
    paths = sorted(source.glob("*.f32"))
    if not paths:
        log.warning(f"No volumes found in '{source}', writing an empty manifest")

    converted = []
    for path in paths:
        volume = read_volume(path)
        check_diffuse_range(volume, source=f"Volume '{path.name}'")
        rng = derive_rng(seed, "patches", path.name)
        patches = extract_patches(volume, patch_size, count, empty_threshold, rng)
        for patch_idx, patch in enumerate(patches):
            sdf = from_diffuse(patch.grid)
            sample_id = f"{path.stem}_p{patch_idx:03d}"
            meta = {
                "source": path.name,
                "origin": list(patch.spec.origin),
                "epsilon_sim": epsilon_sim,
            }
            converted.append((sample_id, sdf, meta))
        log.info(f"{path.name}: {len(patches)} of {count} patches kept")

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        entries = []
        for sample_id, sdf, meta in converted:
            rel = Path("volumes") / f"{sample_id}.f32"
            write_volume(sdf.grid, staging / rel, representation="sdf")
            entries.append(
                ManifestEntry(
                    sample_id=sample_id,
                    path=rel,
                    representation="sdf",
                    provenance="ingested",
                    meta=meta,
                )
            )
        manifest = DatasetManifest(entries=entries, root=staging, name=name)
        manifest = split_dataset(manifest, ratios, derive_rng(seed, "split"))
        manifest.save(staging / "manifest.json")
        if out_dir.exists():
            _check_output(out_dir, overwrite)
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    manifest.root = out_dir
    return manifest
