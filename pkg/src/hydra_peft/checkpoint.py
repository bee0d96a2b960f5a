"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HYDR" | u32 format_version | u32 header_len | header (UTF-8 JSON) | payload | u32 crc32(payload)

The JSON header holds ``tensors``, a list of ``{name, shape, dtype, byte_offset,
nbytes, role}`` records with ``role`` in {frozen, adapter, head}, plus a free
``meta`` object. Tensor data is raw little-endian ``f32`` (default) or ``f64``
packed back to back in manifest order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from hydra_peft.errors import CheckpointError

MAGIC = b"HYDR"
FORMAT_VERSION = 1
ROLES = ("frozen", "adapter", "head")
DTYPES = {"f32": "<f4", "f64": "<f8"}


def encode(tensors: dict[str, tuple[np.ndarray, str]], meta: dict | None = None, dtype: str = "f32") -> bytes:
    if dtype not in DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    manifest = []
    chunks = []
    offset = 0
    for name, (arr, role) in tensors.items():
        if role not in ROLES:
            raise CheckpointError(f"tensor {name!r} has unknown role {role!r}")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        manifest.append(
            {"name": name, "shape": list(np.shape(arr)), "dtype": dtype,
             "byte_offset": offset, "nbytes": len(raw), "role": role}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"tensors": manifest, "meta": meta or {}}, sort_keys=True).encode()
    return (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(header))
        + header
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def decode(blob: bytes) -> tuple[dict[str, tuple[np.ndarray, str]], dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a HYDR checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 12 + header_len
    if start + 4 > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("payload CRC32 mismatch; checkpoint is corrupted")
    tensors = {}
    for entry in header["tensors"]:
        name, role = entry["name"], entry["role"]
        if role not in ROLES:
            raise CheckpointError(f"tensor {name!r} has unknown role {role!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        dt = np.dtype(DTYPES[entry["dtype"]])
        lo, n = entry["byte_offset"], entry["nbytes"]
        if lo + n > len(payload) or n != dt.itemsize * int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r} lies outside the payload")
        arr = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=lo).reshape(entry["shape"])
        tensors[name] = (arr.astype(dt.newbyteorder("=")), role)
    return tensors, header.get("meta", {})


def save(path, tensors, meta: dict | None = None, dtype: str = "f32") -> None:
    Path(path).write_bytes(encode(tensors, meta, dtype))


def load(path) -> tuple[dict[str, tuple[np.ndarray, str]], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def crc_of(path) -> int:
    blob = Path(path).read_bytes()
    return struct.unpack("<I", blob[-4:])[0]
