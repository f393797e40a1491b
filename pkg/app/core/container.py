"""
Versioned binary container for float64 arrays.

Layout (all integers little-endian)::

    offset 0        8 bytes   magic (file kind, ASCII)
    offset 8        uint32    format version
    offset 12       uint32    header length H in bytes
    offset 16       H bytes   UTF-8 JSON header (sorted keys, compact)
    offset 16 + H   ...       array blobs, row-major little-endian float64

The header carries caller metadata plus a ``tensors`` list of
``{"name", "shape", "offset", "count"}`` records, offsets relative to the
first blob byte. Writing the same content twice yields identical bytes.
See doc/container-format.md.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple

import numpy as np

from app.core.exceptions import CheckpointFormatError

_PREFIX = struct.Struct("<8sII")
_FLOAT = np.dtype("<f8")


def dump_container(magic: bytes, version: int, header: Dict[str, Any],
                   arrays: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 8:
        raise ValueError("container magic must be 8 bytes")
    records = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=_FLOAT)
        raw = data.tobytes(order="C")
        records.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        blobs.append(raw)
        offset += len(raw)
    body = dict(header)
    body["tensors"] = records
    encoded = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(encoded)) + encoded + b"".join(blobs)


def load_container(blob: bytes, magic: bytes, supported_versions: Iterable[int]
                   ) -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError("container truncated before header")
    found, version, header_len = _PREFIX.unpack_from(blob, 0)
    if found != magic:
        raise CheckpointFormatError(f"bad magic {found!r}, expected {magic!r}")
    if version not in set(supported_versions):
        raise CheckpointFormatError(f"unsupported format version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointFormatError("container truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None

    arrays = {}
    for rec in header.pop("tensors", []):
        lo = start + rec["offset"]
        hi = lo + rec["count"] * _FLOAT.itemsize
        if hi > len(blob):
            raise CheckpointFormatError(f"tensor {rec['name']} runs past end of file")
        arr = np.frombuffer(blob, dtype=_FLOAT, count=rec["count"], offset=lo)
        arr = arr.astype(np.float64).reshape(rec["shape"])
        arr.setflags(write=False)
        arrays[rec["name"]] = arr
    return version, header, arrays


def write_container(path, magic: bytes, version: int, header: Dict[str, Any],
                    arrays: Iterable[Tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dump_container(magic, version, header, arrays))
    return path


def read_container(path, magic: bytes, supported_versions: Iterable[int]
                   ) -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return load_container(path.read_bytes(), magic, supported_versions)
