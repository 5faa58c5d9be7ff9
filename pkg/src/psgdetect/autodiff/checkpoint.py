"""Named-tensor checkpoint container.

Layout::

    magic   8 bytes  b"PSGCKPT\\0"
    version u32 LE
    mlen    u32 LE   length of the JSON manifest
    manifest         UTF-8 JSON: {"tensors": [{name, shape, offset, nbytes}], "meta": {...}}
    payload          raw little-endian float32 data, concatenated in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"PSGCKPT\0"
VERSION = 1
_HEAD = struct.Struct("<8sII")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise CheckpointError(f"{path}: too short for a checkpoint")
    magic, version, mlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _HEAD.size + mlen
    try:
        manifest = json.loads(blob[_HEAD.size : start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    out = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        out[e["name"]] = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return out, manifest.get("meta", {})
