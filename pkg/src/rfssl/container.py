"""Versioned binary container: magic, JSON header, then raw little-endian arrays.

Layout::

    magic (8 bytes) | version (uint32 LE) | header length (uint64 LE)
    | header (UTF-8 JSON) | array blocks back to back

The header holds free-form metadata under ``"meta"`` and, under
``"arrays"``, the name, dtype, shape and byte offset of every block.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ContainerFormatError(ValueError):
    """The file is not a valid container of the expected kind or version."""


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray] | None = None) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    arrays = arrays or {}
    table = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, checking magic bytes and version.

    Raises ``ContainerFormatError`` on any structural problem; plain
    ``OSError`` for I/O failures is left to propagate.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ContainerFormatError(f"{path}: truncated file")
    got_magic, version, hlen = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise ContainerFormatError(f"{path}: bad magic bytes {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise ContainerFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: corrupt header ({exc})") from exc
    body = start + hlen
    arrays = {}
    for entry in header.get("arrays", []):
        lo = body + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise ContainerFormatError(f"{path}: array {entry['name']!r} is truncated")
        dt = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw[lo:hi], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return header.get("meta", {}), arrays
