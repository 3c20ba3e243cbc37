import json
import logging
import re
import typing as t
from collections.abc import MutableMapping
from pathlib import Path

import znjson

from mpae.utils import atomic_write

log = logging.getLogger(__name__)

StoreRepr = t.Union[t.Literal["keys"], t.Literal["minimal"], t.Literal["full"]]

_KEY_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")


def _encode(self, data: t.Any) -> str:
    cls = znjson.ZnEncoder.from_converters(self.converter) if self.converter else None
    try:
        return json.dumps(data, cls=cls, allow_nan=False, sort_keys=True, indent=2)
    except ValueError:
        if not self.convert_nan:
            raise
    value = json.dumps(data, cls=cls, allow_nan=True, sort_keys=True, indent=2)
    return (
        value.replace("-Infinity", "null")
        .replace("Infinity", "null")
        .replace("NaN", "null")
    )


def _decode(self, data: str) -> t.Any:
    if self.converter:
        return json.loads(data, cls=znjson.ZnDecoder.from_converters(self.converter))
    return json.loads(data)


class RunStore(MutableMapping):
    def __init__(
        self,
        root: str | Path,
        converter: list[t.Type[znjson.ConverterBase]] | None = None,
        convert_nan: bool = True,
        repr_type: StoreRepr = "keys",
    ):
        """Directory-backed mapping of run records.

        Every value is stored as one JSON document ``<root>/<key>.json``,
        written atomically, so concurrent writers of different keys never
        interfere and a crashed run leaves no partial record behind.

        Parameters
        ----------
        root: str|Path
            Directory holding the records; created on first write.
        converter: list[znjson.ConverterBase]|None
            Optional list of znjson converters
            to use for encoding/decoding the data.
        convert_nan: bool
            Convert NaN and Infinity to None. Both are no native
            JSON values and can not be encoded/decoded.
        repr_type: "keys"|"minimal"|"full"
            Control the `repr` appearance of the object.
        """
        self.root = Path(root)
        self.converter = converter
        self.convert_nan = convert_nan
        self.repr_type = repr_type

    def _path(self, key: str) -> Path:
        if not isinstance(key, str) or not _KEY_PATTERN.match(key):
            raise KeyError(key)
        return self.root / f"{key}.json"

    def __getitem__(self, key: str) -> t.Any:
        path = self._path(key)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise KeyError(key) from None
        return _decode(self, text)

    def __setitem__(self, key: str, value: t.Any) -> None:
        path = self._path(key)
        atomic_write(path, _encode(self, value))
        log.debug(f"stored record '{key}' in {self.root}")

    def __delitem__(self, key: str) -> None:
        path = self._path(key)
        try:
            path.unlink()
        except FileNotFoundError:
            raise KeyError(key) from None

    def __iter__(self) -> t.Iterator[str]:
        return iter(self.keys())

    def __len__(self) -> int:
        return len(self.keys())

    def __contains__(self, key: object) -> bool:
        try:
            return self._path(key).exists()
        except KeyError:
            return False

    def keys(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.stem for p in self.root.glob("*.json") if not p.name.startswith("."))

    def values(self) -> list[t.Any]:
        return [self[key] for key in self.keys()]

    def items(self) -> list[tuple[str, t.Any]]:
        return [(key, self[key]) for key in self.keys()]

    def __repr__(self) -> str:
        if self.repr_type == "keys":
            return f"RunStore(keys={self.keys()})"
        elif self.repr_type == "minimal":
            return "RunStore(<unknown>)"
        elif self.repr_type == "full":
            data = {a: b for a, b in self.items()}
            return f"RunStore({data})"
        else:
            raise ValueError(f"Invalid repr_type: {self.repr_type}")

    def __eq__(self, value: object) -> bool:
        if isinstance(value, RunStore):
            return dict(self) == dict(value)
        elif isinstance(value, dict):
            return dict(self) == value
        return False
