"""Float container files for checkpoints and generated latents.

Layout::

    b"JAMFLOW\\0"                 8-byte magic
    uint64 little-endian          header length in bytes
    header                        UTF-8 JSON (sorted keys)
    array payload                 float32 little-endian, manifest order

The header carries ``format_version``, a free-form ``meta`` object (model
config, run state, rng state) and ``manifest``: a list of
``{"name", "shape", "offset", "nbytes"}`` entries relative to the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"JAMFLOW\0"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def to_bytes(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "manifest": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a jamflow container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}")
    payload = memoryview(blob)[16 + hlen :]
    arrays = {}
    for entry in header["manifest"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"array {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[start : start + n], dtype=_DTYPE).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    blob = to_bytes(arrays, meta)
    Path(path).write_bytes(blob)
    return blob


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
