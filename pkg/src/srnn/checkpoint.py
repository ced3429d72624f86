"""Binary checkpoint format.

Layout: magic ``b"SRNN1"``, manifest byte length (u64 LE), UTF-8 JSON
manifest, then named tensors until EOF. Each tensor is: name length (u64),
name bytes, rank (u64), dims (u64 each), float64 data, all little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SRNN1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    manifest = dict(manifest, format_version=FORMAT_VERSION)
    head = dump_manifest(manifest)
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(key)) + key)
        parts.append(struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an SRNN checkpoint (bad magic, expected {MAGIC!r})")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<Q", take(8))
    try:
        manifest = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    tensors = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return manifest, tensors
