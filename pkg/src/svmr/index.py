"""Exhaustive max-cosine gallery search over reference embeddings.

The index is a flat, order-preserving list of (video_id, embedding matrix)
pairs persisted in the SVMIDX binary format.  Search scores every entry
exactly (no approximation) and breaks score ties by ascending video id so
rankings are reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FormatError

INDEX_MAGIC = b"SVMIDX"
INDEX_VERSION = 1


@dataclass
class GalleryIndex:
    video_ids: list[str]
    embeddings: np.ndarray  # (V, d_e, T_emb) float64

    def __post_init__(self):
        if self.embeddings.ndim != 3:
            raise ValueError(f"embeddings must be (V, d_e, T), got "
                             f"{self.embeddings.shape}")
        if len(self.video_ids) != self.embeddings.shape[0]:
            raise ValueError("id count does not match embedding count")
        if len(set(self.video_ids)) != len(self.video_ids):
            dupes = sorted({v for v in self.video_ids if self.video_ids.count(v) > 1})
            raise ValueError(f"duplicate video ids: {dupes}")

    @property
    def d_e(self) -> int:
        return self.embeddings.shape[1]

    @property
    def t_emb(self) -> int:
        return self.embeddings.shape[2]

    def __len__(self) -> int:
        return len(self.video_ids)


def build_index(gallery: list[tuple[str, np.ndarray]], d_e: int | None = None,
                t_emb: int | None = None) -> GalleryIndex:
    """Assemble an index, preserving gallery order and checking dims."""
    ids = [vid for vid, _ in gallery]
    arrays = []
    for vid, emb in gallery:
        emb = np.asarray(emb, dtype=float)
        if emb.ndim != 2:
            raise ValueError(f"{vid}: embedding must be 2-D, got {emb.shape}")
        if d_e is None:
            d_e, t_emb = emb.shape
        if emb.shape != (d_e, t_emb):
            raise ValueError(f"{vid}: embedding shape {emb.shape} != ({d_e}, {t_emb})")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"{vid}: non-finite embedding")
        arrays.append(emb)
    if not arrays:
        if d_e is None:
            d_e, t_emb = 1, 1
        return GalleryIndex([], np.zeros((0, d_e, t_emb)))
    return GalleryIndex(ids, np.stack(arrays))


def search(index: GalleryIndex, e_q: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k videos by max column cosine against the query embedding."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    e_q = np.asarray(e_q, dtype=float)
    if e_q.shape != (index.d_e,):
        raise ValueError(f"query embedding shape {e_q.shape} != ({index.d_e},)")
    qnorm = np.linalg.norm(e_q)
    if not qnorm > 0.0:
        raise ValueError("degenerate query embedding")
    emb = index.embeddings
    dots = np.einsum("d,vdt->vt", e_q, emb)
    norms = np.linalg.norm(emb, axis=1)
    denom = qnorm * norms
    cos = np.zeros_like(dots)
    np.divide(dots, denom, out=cos, where=denom > 0.0)
    scores = cos.max(axis=1)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.video_ids[i]))
    return [(index.video_ids[i], float(scores[i])) for i in order[:k]]


def save_index(index: GalleryIndex, path: str | Path) -> None:
    parts = [INDEX_MAGIC, struct.pack("<IIII", INDEX_VERSION, index.d_e,
                                      index.t_emb, len(index))]
    for vid, emb in zip(index.video_ids, index.embeddings):
        vid_bytes = vid.encode("utf-8")
        parts.append(struct.pack("<I", len(vid_bytes)))
        parts.append(vid_bytes)
        parts.append(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> GalleryIndex:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 22:
        raise FormatError(f"{path}: truncated header")
    if blob[:6] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:6]!r}")
    version, d_e, t_emb, count = struct.unpack("<IIII", blob[6:22])
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 22
    ids = []
    embs = np.zeros((count, d_e, t_emb))
    entry_floats = d_e * t_emb
    for v in range(count):
        if offset + 4 > len(blob):
            raise FormatError(f"{path}: truncated entry {v}")
        (id_len,) = struct.unpack("<I", blob[offset:offset + 4])
        offset += 4
        end = offset + id_len + 4 * entry_floats
        if end > len(blob):
            raise FormatError(f"{path}: truncated entry {v}")
        ids.append(blob[offset:offset + id_len].decode("utf-8"))
        offset += id_len
        embs[v] = np.frombuffer(blob[offset:offset + 4 * entry_floats],
                                dtype="<f4").reshape(d_e, t_emb)
        offset += 4 * entry_floats
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return GalleryIndex(ids, embs)
