"""Versioned binary container for named arrays plus a JSON header.

Layout::

    b"STFC" | u16 version | u32 header length | header (UTF-8 JSON) | payloads

The header lists each array's name, dtype, shape, offset and byte count;
payloads are raw row-major little-endian bytes, so a write/read cycle is
bit-exact (NaN payloads included).
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

MAGIC = b"STFC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


class ContainerError(OSError):
    """The file is not a readable container of a supported version."""


def write_container(path: str | os.PathLike, kind: str, arrays: dict[str, np.ndarray],
                    meta: dict[str, Any] | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = str(arr.dtype)
        if key not in _DTYPES:
            raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike, kind: str | None = None
                   ) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(arrays, meta)``; raise ``ContainerError`` on a bad file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    if version != VERSION:
        raise ContainerError(f"{path}: container version {version} unsupported (expected {VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from None
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(blob):
            raise ContainerError(f"{path}: payload for {e['name']!r} is truncated")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(_DTYPES[e["dtype"]]))
        arrays[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return arrays, header["meta"]
