"""Versioned binary parameter container.

Layout (little-endian)::

    magic      8 bytes  b"LRMCKPT\\0"
    version    u32
    digest     32 bytes sha256 of the canonical architecture config JSON
    meta_len   u32, then meta_len bytes of UTF-8 JSON (config and extras)
    n_blocks   u32
    per block: name_len u32, name bytes, rank u32, dims u32 * rank,
               float32 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LRMCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> bytes:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def save_checkpoint(path, params: dict, config: dict, extra: dict | None = None) -> None:
    meta = json.dumps({"config": config, "extra": extra or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(config), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expected_config: dict | None = None):
    """Return ``(params, config, extra)``; params come back as float32."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = data[pos : pos + 32]
    pos += 32
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + mlen].decode())
    pos += mlen
    config = meta["config"]
    if config_digest(config) != digest:
        raise CheckpointError(f"{path}: config digest does not match embedded config")
    if expected_config is not None and config_digest(expected_config) != digest:
        raise CheckpointError(f"{path}: architecture digest mismatch")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        params[name] = arr.astype(np.float32)
    return params, config, meta.get("extra", {})
