"""Binary checkpoint format.

Layout (little-endian)::

    b"IR4P" | u32 version
    u32 block count
    per block: u32 name length | utf-8 name | u32 rank | u32 extents[rank] | f32 payload

A sidecar ``<file>.manifest`` lists ``name shape sha256`` per block.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IR4P"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save(path, blocks: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    out = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    lines = []
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        body = _payload(arr)
        out.append(body)
        shape = "x".join(map(str, arr.shape)) or "scalar"
        lines.append(f"{name}\t{shape}\t{hashlib.sha256(body).hexdigest()}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")
    return path


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    blocks = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"{path}: truncated block {name!r}")
            arr = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(shape)
            pos += size
            blocks[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated ({exc})") from None
    return blocks


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
