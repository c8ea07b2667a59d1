"""Bit-exact disk format for grids and the dataset-spec document.

Container layout (little-endian, no padding):

    magic   4 bytes  b"PDLT"
    version u16      currently 1
    dtype   u8       1 = uint16, 2 = uint32, 3 = float32
    ndim    u8       2 or 3
    dims    ndim*u32
    payload prod(dims) * itemsize bytes, row-major

Deterministic byte-for-byte: identical arrays produce identical files on any
platform. Concurrent writes to one path are undefined.

Dataset specs travel as JSON with the fields of
:class:`~panopticore.core.DatasetSpec`.
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .core import CategorySpec, DatasetSpec

__all__ = [
    "TensorIoError",
    "BadMagicError",
    "UnsupportedVersionError",
    "PayloadLengthError",
    "SpecFormatError",
    "write_tensor",
    "read_tensor",
    "write_spec",
    "read_spec",
]

MAGIC = b"PDLT"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.uint16): 1,
    np.dtype(np.uint32): 2,
    np.dtype(np.float32): 3,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


class TensorIoError(Exception):
    """Base class for container format problems."""


class BadMagicError(TensorIoError):
    pass


class UnsupportedVersionError(TensorIoError):
    pass


class PayloadLengthError(TensorIoError):
    pass


class SpecFormatError(ValueError):
    """A dataset-spec document failed to parse or validate."""


def write_tensor(grid: np.ndarray, path: str | Path) -> None:
    """Serialize a 2-D or 3-D grid; dtype must be uint16, uint32, or float32."""
    dtype = np.dtype(grid.dtype)
    if dtype not in _DTYPE_CODES:
        raise TensorIoError(
            f"unsupported dtype {dtype}; expected uint16, uint32, or float32"
        )
    if grid.ndim not in (2, 3):
        raise TensorIoError(f"unsupported rank {grid.ndim}; expected 2-D or 3-D")
    header = MAGIC + struct.pack(
        "<HBB", VERSION, _DTYPE_CODES[dtype], grid.ndim
    ) + struct.pack(f"<{grid.ndim}I", *grid.shape)
    payload = np.ascontiguousarray(grid).astype(dtype.newbyteorder("<")).tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as e:
        raise TensorIoError(f"cannot write tensor to {path}: {e}") from e


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a container back into a native-endian array."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise TensorIoError(f"cannot read tensor from {path}: {e}") from e
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a tensor container (bad magic)")
    version, dtype_code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorIoError(f"{path}: unknown dtype code {dtype_code}")
    if ndim not in (2, 3):
        raise TensorIoError(f"{path}: unsupported rank {ndim}")
    header_end = 8 + 4 * ndim
    if len(blob) < header_end:
        raise PayloadLengthError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", blob[8:header_end])
    dtype = _CODE_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - header_end != expected:
        raise PayloadLengthError(
            f"{path}: payload is {len(blob) - header_end} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), offset=header_end)
    return data.reshape(dims).astype(dtype)


def write_spec(spec: DatasetSpec, path: str | Path) -> None:
    """Write a dataset spec as deterministic JSON."""
    doc = {
        "categories": [
            {"id": c.id, "name": c.name, "is_thing": c.is_thing}
            for c in sorted(spec.categories, key=lambda c: c.id)
        ],
        "ignore_label": spec.ignore_label,
        "label_divisor": spec.label_divisor,
        "stuff_area_threshold": spec.stuff_area_threshold,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_spec(path: str | Path) -> DatasetSpec:
    """Parse and validate a dataset-spec document.

    A missing ``stuff_area_threshold`` defaults to 0 with a warning; any
    other malformed or inconsistent field raises :class:`SpecFormatError`
    naming the field.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise TensorIoError(f"cannot read spec from {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SpecFormatError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SpecFormatError(f"{path}: expected a JSON object at top level")
    for key in ("categories", "ignore_label"):
        if key not in doc:
            raise SpecFormatError(f"{path}: missing field {key!r}")
    if "stuff_area_threshold" not in doc:
        warnings.warn(
            f"{path}: stuff_area_threshold missing, defaulting to 0", stacklevel=2
        )
    categories = []
    for i, entry in enumerate(doc["categories"]):
        try:
            categories.append(
                CategorySpec(
                    id=int(entry["id"]),
                    name=str(entry.get("name", f"category_{entry['id']}")),
                    is_thing=bool(entry["is_thing"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SpecFormatError(f"{path}: categories[{i}]: {e}") from e
    try:
        return DatasetSpec(
            categories=tuple(categories),
            ignore_label=int(doc["ignore_label"]),
            label_divisor=int(doc.get("label_divisor", 1000)),
            stuff_area_threshold=int(doc.get("stuff_area_threshold", 0)),
        )
    except (TypeError, ValueError) as e:
        raise SpecFormatError(f"{path}: {e}") from e
