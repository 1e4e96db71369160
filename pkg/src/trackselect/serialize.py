"""Binary container for arrays plus JSON metadata.

Layout: magic ``TSEL``, u32 format version, u64 header length, UTF-8 JSON
header (metadata and a shape/dtype manifest), raw little-endian array bytes
in manifest order, then a 32-byte SHA-256 of everything before it. Output is
byte-stable for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSEL"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        a = a.astype(dt, copy=False)
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta or {}, "arrays": manifest}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise ContainerError("not a trackselect container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum mismatch")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    off = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(body):
            raise ContainerError(f"truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[off : off + n], dtype=dt).reshape(entry["shape"]).copy()
        off += n
    if off != len(body):
        raise ContainerError("trailing bytes after array data")
    return arrays, header["meta"]


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def check_manifest(arrays: dict[str, np.ndarray], expected: dict[str, tuple]):
    """Reject containers whose array shapes differ from what the model expects."""
    for name, shape in expected.items():
        if name not in arrays:
            raise ContainerError(f"missing array {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise ContainerError(f"array {name!r} has shape {arrays[name].shape}, expected {tuple(shape)}")
