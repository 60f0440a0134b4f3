"""Per-WSI bags of patches or frozen embeddings, with dihedral augmentation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .records import read_embeddings, read_patch_records, patch_key
from .tiling import dihedral_transform


def patch_path(patch_dir, wsi_id: str) -> Path:
    return Path(patch_dir) / f"{wsi_id}.gpr"


def embedding_path(patch_dir, wsi_id: str) -> Path:
    return Path(patch_dir) / f"{wsi_id}.gem"


class BagStore:
    """Lazy, cached access to the patch material of each WSI.

    In ``frozen_file`` mode a bag is a stack of embeddings looked up by
    (origin, dihedral op); in ``trainable_toy`` mode it is the raw patches
    with the op applied to the pixels.
    """

    def __init__(self, patch_dir, mode: str):
        self.patch_dir = Path(patch_dir)
        self.mode = mode
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _entry(self, wsi_id: str) -> tuple[np.ndarray, np.ndarray]:
        if wsi_id not in self._cache:
            records = read_patch_records(patch_path(self.patch_dir, wsi_id))
            if self.mode == "frozen_file":
                emb = read_embeddings(embedding_path(self.patch_dir, wsi_id))
                data = np.stack(
                    [emb.lookup([patch_key(x, y, op) for x, y in records.origins]) for op in range(8)]
                ) if len(records) else np.zeros((8, 0, emb.embed_dim), np.float32)
            else:
                data = records.patches
            self._cache[wsi_id] = (records.origins, data)
        return self._cache[wsi_id]

    def origins(self, wsi_id: str) -> np.ndarray:
        return self._entry(wsi_id)[0]

    def count(self, wsi_id: str) -> int:
        return len(self._entry(wsi_id)[0])

    def bag(self, wsi_id: str, ops: np.ndarray | None = None, index: np.ndarray | None = None) -> np.ndarray:
        """Items of one WSI, optionally subset by ``index`` and transformed per item by ``ops``."""
        _, data = self._entry(wsi_id)
        n = data.shape[1] if self.mode == "frozen_file" else data.shape[0]
        index = np.arange(n) if index is None else np.asarray(index)
        ops = np.zeros(len(index), dtype=int) if ops is None else np.asarray(ops)
        if self.mode == "frozen_file":
            return data[ops, index]
        return np.stack([dihedral_transform(data[i], int(op)) for i, op in zip(index, ops)]) if len(index) else data[:0]

    def unit_bag(self, wsi_ids, ops: np.ndarray | None = None) -> np.ndarray:
        """Pooled bag over several WSIs; ``ops`` covers the concatenation."""
        counts = [self.count(w) for w in wsi_ids]
        ops = np.zeros(sum(counts), dtype=int) if ops is None else np.asarray(ops)
        parts, start = [], 0
        for w, c in zip(wsi_ids, counts):
            parts.append(self.bag(w, ops[start : start + c]))
            start += c
        return np.concatenate(parts) if parts else np.zeros((0,))
