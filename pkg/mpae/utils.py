import csv
import hashlib
import io
import json
import os
import tempfile
import typing as t
from fractions import Fraction
from pathlib import Path

import numpy as np


def atomic_write(path: str | os.PathLike, data: str | bytes) -> Path:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def config_hash(data: t.Any) -> str:
    """Stable short hash of a JSON-serializable structure."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def file_digest(path: str | Path) -> str:
    """Short sha256 of a file's bytes, empty if the file does not exist."""
    try:
        data = Path(path).read_bytes()
    except (FileNotFoundError, NotADirectoryError):
        return ""
    return hashlib.sha256(data).hexdigest()[:16]


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for (seed, *keys), stable across runs and processes."""
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        entropy.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def parse_number(value: str | float) -> float:
    """Parse '1/32', '0.03125' or 1e-5 into a float."""
    if isinstance(value, (int, float)):
        return float(value)
    return float(Fraction(value.strip()))


def format_fraction(value: float, max_denominator: int = 4096) -> str:
    """'1/32' for reciprocals of integers, plain repr otherwise."""
    frac = Fraction(value).limit_denominator(max_denominator)
    if frac.numerator == 1 and float(frac) == value:
        return f"1/{frac.denominator}"
    return repr(float(value))


def format_float(value: float) -> str:
    return repr(float(value))


def _csv_cell(value: t.Any) -> str:
    if isinstance(value, float):
        return format_float(value)
    if value is None:
        return ""
    return str(value)


def csv_text(rows: t.Iterable[t.Mapping[str, t.Any]], fieldnames: t.Sequence[str]) -> str:
    """Render rows as CSV; floats use ``repr`` so output is byte-stable."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([_csv_cell(row[name]) for name in fieldnames])
    return buffer.getvalue()


def write_csv(
    path: str | os.PathLike,
    rows: t.Iterable[t.Mapping[str, t.Any]],
    fieldnames: t.Sequence[str],
) -> Path:
    return atomic_write(path, csv_text(rows, fieldnames))


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def slug(text: str) -> str:
    """File-name friendly form of a tag, e.g. 'tanh:1/32' -> 'tanh_1-32'."""
    return text.replace(":", "_").replace("/", "-").replace(" ", "_")
