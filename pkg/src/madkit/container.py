"""Single-file array container: JSON manifest + named binary blobs.

Layout, all little-endian:

    magic "MADC0001" (8 bytes)
    manifest length  (u64)
    manifest JSON    (utf-8, canonical: sorted keys, no whitespace)
    blob data        (concatenated, in manifest order)

The manifest records name, dtype, shape, offset, byte length, and CRC-32
for every blob, plus a caller-declared schema string and a free-form JSON
metadata block.  Blobs are stored sorted by name and the manifest is
canonical JSON, so writing the same arrays twice produces byte-identical
files.  Every read verifies every checksum; truncation and corruption both
surface as ChecksumError.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, DataError, ParameterError, SchemaError

_MAGIC = b"MADC0001"
_FORMAT_VERSION = 1

# dtype code -> numpy dtype; all explicit-endianness or single-byte
_DTYPES = {
    "<f8": np.dtype("<f8"),
    "<f4": np.dtype("<f4"),
    "<i4": np.dtype("<i4"),
    "<i8": np.dtype("<i8"),
    "|u1": np.dtype("|u1"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Container:
    """In-memory view of a container file."""
    schema: str
    meta: dict
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.blobs:
            raise DataError(f"container has no blob named {name!r}")
        return self.blobs[name]


def _dtype_code(arr: np.ndarray) -> str:
    canonical = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    # normalize native-endian to explicit little-endian (this platform is LE)
    for code, dt in _DTYPES.items():
        if canonical == dt:
            return code
    raise ParameterError(
        f"unsupported blob dtype {arr.dtype}; supported: {sorted(_DTYPES)}")


def write_container(path: str | os.PathLike, blobs: dict[str, np.ndarray],
                    schema: str, meta: dict | None = None) -> None:
    """Write blobs atomically (tmp file + rename). Blob names must be non-empty."""
    entries = []
    payload = []
    offset = 0
    for name in sorted(blobs):
        if not name:
            raise ParameterError("blob names must be non-empty")
        arr = np.ascontiguousarray(blobs[name])
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
        })
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "schema": schema,
        "meta": meta or {},
        "blobs": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(len(mbytes).to_bytes(8, "little"))
        f.write(mbytes)
        for raw in payload:
            f.write(raw)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike, schema: str | None = None,
                   verify: bool = True) -> Container:
    """Read a container; checks magic, format version, schema, and checksums."""
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:8] != _MAGIC:
            raise SchemaError(f"{path}: not a container file (bad magic)")
        mlen = int.from_bytes(head[8:16], "little")
        mbytes = f.read(mlen)
        if len(mbytes) != mlen:
            raise ChecksumError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(mbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: unreadable manifest: {e}") from e
        if manifest.get("format_version") != _FORMAT_VERSION:
            raise SchemaError(
                f"{path}: format version {manifest.get('format_version')}, "
                f"expected {_FORMAT_VERSION}")
        if schema is not None and manifest.get("schema") != schema:
            raise SchemaError(
                f"{path}: schema {manifest.get('schema')!r}, expected {schema!r}")
        data = f.read()
    blobs: dict[str, np.ndarray] = {}
    for entry in manifest.get("blobs", []):
        name = entry["name"]
        code = entry["dtype"]
        if code not in _DTYPES:
            raise SchemaError(f"{path}: blob {name!r} has unknown dtype {code!r}")
        lo, n = entry["offset"], entry["nbytes"]
        raw = data[lo:lo + n]
        if len(raw) != n:
            raise ChecksumError(f"{path}: blob {name!r} truncated "
                                f"({len(raw)} of {n} bytes)")
        if verify and (zlib.crc32(raw) & 0xFFFFFFFF) != entry["crc32"]:
            raise ChecksumError(f"{path}: blob {name!r} failed its CRC-32 check")
        arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(entry["shape"])
        blobs[name] = arr.copy()   # own the memory; source buffer is released
    return Container(schema=manifest.get("schema", ""),
                     meta=manifest.get("meta", {}), blobs=blobs)
