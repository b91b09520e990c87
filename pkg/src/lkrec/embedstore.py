"""Per-news pooled LLM layer states and the LKEM interchange file.

LKEM layout (all integers little-endian)::

    b"LKEM"  u32 version=1  u32 L  u32 D  u32 N
    N x ( u16 id_len, id bytes (UTF-8), L*D float32 little-endian )

Records are written sorted by id so identical stores give identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LKEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_IDLEN = struct.Struct("<H")


class EmbeddingFormatError(ValueError):
    pass


class LayerEmbeddings(dict):
    """``news_id -> (L, D) float64 array``; all entries share L and D."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, layers: int | None = None, dim: int | None = None):
        super().__init__()
        self.layers = layers
        self.dim = dim
        for k, v in (entries or {}).items():
            self[k] = v

    def __setitem__(self, key: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"{key}: expected an L x D matrix, got shape {arr.shape}")
        if self.layers is None:
            self.layers, self.dim = arr.shape
        elif arr.shape != (self.layers, self.dim):
            raise ValueError(f"{key}: shape {arr.shape} differs from store shape {(self.layers, self.dim)}")
        super().__setitem__(key, arr)

    def missing(self, news_ids) -> list[str]:
        return sorted(n for n in set(news_ids) if n not in self)


def dumps_store(entries: Mapping[str, np.ndarray]) -> bytes:
    ids = sorted(entries)
    shape = None
    chunks = []
    for nid in ids:
        arr = np.asarray(entries[nid], dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"{nid}: expected an L x D matrix")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"{nid}: non-uniform shape {arr.shape}, expected {shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"{nid}: non-finite value")
        raw = nid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"news id too long: {nid[:40]}...")
        chunks.append(_IDLEN.pack(len(raw)) + raw + arr.astype("<f4").tobytes())
    layers, dim = shape if shape is not None else (
        getattr(entries, "layers", None) or 0,
        getattr(entries, "dim", None) or 0,
    )
    return _HEADER.pack(MAGIC, VERSION, layers, dim, len(ids)) + b"".join(chunks)


def write_store(entries: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps_store(entries))


def loads_store(buf: bytes) -> LayerEmbeddings:
    if len(buf) < _HEADER.size:
        raise EmbeddingFormatError("file shorter than LKEM header")
    magic, version, layers, dim, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported LKEM version {version}")
    store = LayerEmbeddings(layers=layers or None, dim=dim or None)
    store.layers, store.dim = layers, dim
    off = _HEADER.size
    nbytes = layers * dim * 4
    for i in range(n):
        if off + _IDLEN.size > len(buf):
            raise EmbeddingFormatError(f"truncated record {i}: missing id length")
        (idlen,) = _IDLEN.unpack_from(buf, off)
        off += _IDLEN.size
        if off + idlen + nbytes > len(buf):
            raise EmbeddingFormatError(f"truncated record {i}")
        nid = buf[off : off + idlen].decode("utf-8")
        off += idlen
        vals = np.frombuffer(buf, dtype="<f4", count=layers * dim, offset=off).astype(np.float64)
        off += nbytes
        store[nid] = vals.reshape(layers, dim)
    if off != len(buf):
        raise EmbeddingFormatError(f"{len(buf) - off} trailing bytes after {n} records")
    return store


def read_store(path: str | Path) -> LayerEmbeddings:
    return loads_store(Path(path).read_bytes())


def synthetic_embeddings(news_id: str, layers: int, dim: int, seed: int, planted: np.ndarray | None = None) -> np.ndarray:
    """Deterministic stand-in for pooled LLM states.

    Each row is a unit vector drawn from a generator seeded by a hash of
    ``(seed, news_id, layer)``.  ``planted`` (length ``dim``) is added to
    every row afterwards.
    """
    if layers < 1 or dim < 1:
        raise ValueError("layers and dim must be >= 1")
    out = np.empty((layers, dim))
    for layer in range(layers):
        digest = hashlib.sha256(f"{seed}\x1f{news_id}\x1f{layer}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        row = rng.standard_normal(dim)
        out[layer] = row / np.linalg.norm(row)
    if planted is not None:
        out += np.asarray(planted, dtype=np.float64)[None, :]
    return out
