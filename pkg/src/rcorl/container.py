"""Binary container shared by datasets and saved policies.

Layout::

    b"RCORLBIN"                      8 bytes magic
    format version                   uint32 little-endian
    header length                    uint64 little-endian
    header                           UTF-8 JSON: manifest + array table
    arrays                           little-endian float64, row-major, in table order
    sha256 of all preceding bytes    32 bytes
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from rcorl.exceptions import ChecksumError, FormatError

MAGIC = b"RCORLBIN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def dumps(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        table.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "manifest": manifest, "arrays": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + 32:
        raise FormatError("file too short to be a container")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise FormatError(f"container format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if start + header_len + 32 > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    offset = start + header_len
    expected = offset + 8 * sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"])
    if len(data) != expected + 32:
        raise FormatError(f"truncated or oversized payload: {len(data)} bytes, expected {expected + 32}")
    if hashlib.sha256(data[:expected]).digest() != data[expected:]:
        raise ChecksumError("checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    return header["manifest"], arrays


def write(path, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(manifest, arrays))
    tmp.replace(path)
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
