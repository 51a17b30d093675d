"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic      8 bytes  b"GLDRCKPT"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (free-form metadata)
    count      u32
    count records of:
        name_len u32, name (UTF-8)
        ndim     u32, dims u64 * ndim
        data     float64 * prod(dims)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLDRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_arrays, meta: dict | None = None):
    """Write ``[(name, array), ...]`` as float64 records."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(named_arrays))]
    seen = set()
    for name, arr in named_arrays:
        if name in seen:
            raise CheckpointError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays by name, metadata)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint metadata: {err}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        size = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last record")
    return arrays, meta


def save_model(path, model, extra: dict | None = None):
    from dataclasses import asdict

    meta = {"reader": asdict(model.config), **(extra or {})}
    save_checkpoint(path, model.named_parameters(), meta)


def load_model(path):
    """Rebuild a :class:`~gldr.reader.ReaderModel` from a checkpoint."""
    from .reader import ReaderConfig, init_reader

    arrays, meta = load_checkpoint(path)
    if "reader" not in meta:
        raise CheckpointError("checkpoint has no reader configuration")
    model = init_reader(ReaderConfig(**meta["reader"]))
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        raise CheckpointError("checkpoint parameters do not match the reader configuration")
    for name, p in named.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
        p.data[...] = arrays[name]
    return model, meta
