"""Named-block binary checkpoints shared by both model stages.

Layout: 5 magic bytes, then little-endian u32 version and block count, then
per block a u32 name length, the UTF-8 name, u32 ndim, u32 dims, and the
float32 payload.  Blocks are written sorted by name so files are
reproducible regardless of construction order.
"""

from __future__ import annotations

import fcntl
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import FormatError

VERSION = 1
STAGE1_MAGIC = b"SVMR1"
STAGE2_MAGIC = b"SVMR2"


def save_checkpoint(blocks: dict[str, np.ndarray], path: str | Path,
                    magic: bytes) -> None:
    """Atomically write parameter blocks under an advisory file lock."""
    if len(magic) != 5:
        raise ValueError(f"magic must be 5 bytes, got {magic!r}")
    path = Path(path)
    parts = [magic, struct.pack("<II", VERSION, len(blocks))]
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)

    lock_path = path.with_suffix(path.suffix + ".lock")
    with open(lock_path, "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name)
        try:
            os.write(fd, blob)
        finally:
            os.close(fd)
        os.replace(tmp, path)
        fcntl.flock(lock, fcntl.LOCK_UN)


def load_checkpoint(path: str | Path, magic: bytes) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header")
    if blob[:5] != magic:
        raise FormatError(f"{path}: bad magic {blob[:5]!r}, expected {magic!r}")
    version, n_blocks = struct.unpack("<II", blob[5:13])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 13
    blocks: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"{path}: truncated block data")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in blocks:
            raise FormatError(f"{path}: duplicate block {name!r}")
        blocks[name] = data.astype(np.float64)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return blocks
