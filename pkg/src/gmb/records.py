"""Binary containers for tissue patches and frozen patch embeddings.

Patch record file (little-endian)::

    b"GPR1" | u16 version=1 | u16 patch_edge_px | f32 pixel_size_um | u32 count
    count x ( u32 x | u32 y | edge*edge*3 bytes RGB )

Embedding file (little-endian)::

    b"GEM1" | u16 version=1 | u32 embed_dim | u32 count
    count x ( 32 bytes ASCII hex key | f32 x embed_dim )
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PATCH_MAGIC = b"GPR1"
EMBED_MAGIC = b"GEM1"
VERSION = 1
_PATCH_HEADER = struct.Struct("<4sHHfI")
_EMBED_HEADER = struct.Struct("<4sHII")
_ORIGIN = struct.Struct("<II")


class RecordFormatError(ValueError):
    pass


@dataclass
class PatchRecordFile:
    patch_edge_px: int
    pixel_size_um: float
    origins: np.ndarray  # (N, 2) uint32, columns x, y
    patches: np.ndarray  # (N, edge, edge, 3) uint8

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.uint32).reshape(-1, 2)
        self.patches = np.asarray(self.patches, dtype=np.uint8)
        if self.patches.size == 0:
            self.patches = self.patches.reshape(0, self.patch_edge_px, self.patch_edge_px, 3)
        e = self.patch_edge_px
        if self.patches.shape[1:] != (e, e, 3):
            raise RecordFormatError(f"patches must be (N, {e}, {e}, 3), got {self.patches.shape}")
        if len(self.origins) != len(self.patches):
            raise RecordFormatError("origins and patches differ in length")

    def __len__(self) -> int:
        return len(self.patches)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchRecordFile):
            return NotImplemented
        return (
            self.patch_edge_px == other.patch_edge_px
            and np.float32(self.pixel_size_um) == np.float32(other.pixel_size_um)
            and np.array_equal(self.origins, other.origins)
            and np.array_equal(self.patches, other.patches)
        )


def encode_patch_records(f: PatchRecordFile) -> bytes:
    parts = [_PATCH_HEADER.pack(PATCH_MAGIC, VERSION, f.patch_edge_px, f.pixel_size_um, len(f))]
    for (x, y), patch in zip(f.origins, f.patches):
        parts.append(_ORIGIN.pack(int(x), int(y)))
        parts.append(patch.tobytes())
    return b"".join(parts)


def decode_patch_records(data: bytes) -> PatchRecordFile:
    if len(data) < _PATCH_HEADER.size:
        raise RecordFormatError("truncated header")
    magic, version, edge, um, count = _PATCH_HEADER.unpack_from(data, 0)
    if magic != PATCH_MAGIC:
        raise RecordFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RecordFormatError(f"unsupported version {version}")
    rec = _ORIGIN.size + edge * edge * 3
    body = len(data) - _PATCH_HEADER.size
    if body != count * rec:
        raise RecordFormatError(f"count mismatch: header says {count} records, payload holds {body / rec:.2f}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=_PATCH_HEADER.size).reshape(count, rec)
    origins = raw[:, : _ORIGIN.size].copy().view("<u4").reshape(count, 2)
    patches = raw[:, _ORIGIN.size :].reshape(count, edge, edge, 3).copy()
    return PatchRecordFile(edge, float(um), origins, patches)


def write_patch_records(path, f: PatchRecordFile) -> None:
    Path(path).write_bytes(encode_patch_records(f))


def read_patch_records(path) -> PatchRecordFile:
    return decode_patch_records(Path(path).read_bytes())


# -- embeddings --------------------------------------------------------------


def patch_key(x: int, y: int, op: int = 0) -> str:
    """WSI-local key of a patch origin under a dihedral transform."""
    return hashlib.md5(f"{int(x)}|{int(y)}|{int(op)}".encode()).hexdigest()


@dataclass
class EmbeddingFile:
    keys: list[str]
    vectors: np.ndarray  # (count, embed_dim) float32

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.keys) != len(self.vectors):
            raise RecordFormatError("keys/vectors mismatch")
        self._index = {k: i for i, k in enumerate(self.keys)}

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, keys) -> np.ndarray:
        try:
            idx = [self._index[k] for k in keys]
        except KeyError as exc:
            raise KeyError(f"no embedding for patch key {exc.args[0]}") from None
        return self.vectors[idx]


def write_embeddings(path, emb: EmbeddingFile) -> None:
    parts = [_EMBED_HEADER.pack(EMBED_MAGIC, VERSION, emb.embed_dim, len(emb.keys))]
    vec = emb.vectors.astype("<f4")
    for key, row in zip(emb.keys, vec):
        kb = key.encode("ascii")
        if len(kb) != 32:
            raise RecordFormatError(f"patch key must be 32 hex chars, got {key!r}")
        parts.append(kb)
        parts.append(row.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> EmbeddingFile:
    data = Path(path).read_bytes()
    if len(data) < _EMBED_HEADER.size:
        raise RecordFormatError("truncated header")
    magic, version, dim, count = _EMBED_HEADER.unpack_from(data, 0)
    if magic != EMBED_MAGIC:
        raise RecordFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RecordFormatError(f"unsupported version {version}")
    rec = 32 + 4 * dim
    if len(data) - _EMBED_HEADER.size != count * rec:
        raise RecordFormatError("count mismatch")
    raw = np.frombuffer(data, dtype=np.uint8, offset=_EMBED_HEADER.size).reshape(count, rec)
    keys = [bytes(k).decode("ascii") for k in raw[:, :32]]
    vectors = raw[:, 32:].copy().view("<f4").reshape(count, dim)
    return EmbeddingFile(keys, vectors)
