"""Tissue detection, pyramid resampling and grid tiling of rasters into patch records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .records import PatchRecordFile

MASK_UM_PER_PX = 8.0


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdParams:
    s_min: float = 0.05
    l_max: float = 0.95


@dataclass
class TissueMask:
    mask: np.ndarray  # (H, W) bool
    pixel_size_um: float

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass
class RasterPyramid:
    levels: list[tuple[np.ndarray, float]]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid has no levels")
        ums = [um for _, um in self.levels]
        if any(b <= a for a, b in zip(ums, ums[1:])):
            raise ValueError("pyramid levels must have strictly increasing pixel size")
        shapes = [img.shape[:2] for img, _ in self.levels]
        if any(b[0] > a[0] or b[1] > a[1] for a, b in zip(shapes, shapes[1:])):
            raise ValueError("pyramid level dimensions must shrink with pixel size")

    @property
    def finest_um(self) -> float:
        return self.levels[0][1]

    def closest_finer_level(self, target_um: float) -> tuple[np.ndarray, float]:
        """Coarsest level whose pixel size does not exceed ``target_um``."""
        candidates = [(img, um) for img, um in self.levels if um <= target_um * (1 + 1e-9)]
        if not candidates:
            raise ResolutionError(f"target {target_um} um/px is finer than the finest level ({self.finest_um} um/px)")
        return candidates[-1]


def load_pyramid(sidecar_path) -> RasterPyramid:
    """Load a PNG pyramid described by a JSON sidecar ``{pixel_size_um, levels: [{file, pixel_size_um}]}``."""
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    levels = []
    for level in sorted(meta["levels"], key=lambda lv: lv["pixel_size_um"]):
        with Image.open(sidecar_path.parent / level["file"]) as im:
            levels.append((np.asarray(im.convert("RGB")), float(level["pixel_size_um"])))
    return RasterPyramid(levels)


def segment_tissue_threshold(raster: np.ndarray, params: ThresholdParams | None = None, pixel_size_um: float = MASK_UM_PER_PX) -> TissueMask:
    """Mark a pixel as tissue when it is saturated enough and not too bright.

    Saturation is the HSV saturation ``(max - min) / max`` and luminance the
    Rec. 601 luma, both on the unit range.
    """
    params = params or ThresholdParams()
    if raster.size == 0:
        raise ValueError("empty raster")
    rgb = raster[..., :3].astype(np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    luma = rgb @ np.array([0.299, 0.587, 0.114])
    return TissueMask((sat >= params.s_min) & (luma <= params.l_max), pixel_size_um)


def resample_lanczos(src: np.ndarray, src_um: float, dst_um: float) -> np.ndarray:
    """Downsample by ``src_um / dst_um`` with a Lanczos-3 filter; identity when equal."""
    if dst_um < src_um * (1 - 1e-9):
        raise ResolutionError(f"refusing to upsample from {src_um} to {dst_um} um/px")
    if abs(dst_um - src_um) <= 1e-9 * src_um:
        return src.copy()
    scale = src_um / dst_um
    h, w = src.shape[:2]
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(src).resize(size, Image.Resampling.LANCZOS))


def mask_to_frame(mask: TissueMask, frame_um: float, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour rescale of a binary mask onto a frame of ``shape`` pixels."""
    ratio = frame_um / mask.pixel_size_um
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * ratio).astype(int), mask.mask.shape[0] - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * ratio).astype(int), mask.mask.shape[1] - 1)
    return mask.mask[np.ix_(rows, cols)]


def grid_origins(frame_mask: np.ndarray, edge_px: int, overlap_px: int, min_tissue_fraction: float) -> list[tuple[int, int]]:
    """(x, y) origins of full windows on the stride grid passing the tissue threshold."""
    if not edge_px > overlap_px >= 0:
        raise ValueError("need edge_px > overlap_px >= 0")
    stride = edge_px - overlap_px
    h, w = frame_mask.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = frame_mask.astype(np.int64).cumsum(0).cumsum(1)
    need = min_tissue_fraction * edge_px * edge_px
    out = []
    for y in range(0, h - edge_px + 1, stride):
        for x in range(0, w - edge_px + 1, stride):
            count = (
                integral[y + edge_px, x + edge_px]
                - integral[y, x + edge_px]
                - integral[y + edge_px, x]
                + integral[y, x]
            )
            if count >= need - 1e-9:
                out.append((x, y))
    return out


def extract_patch_grid(
    pyramid: RasterPyramid,
    mask: TissueMask,
    edge_px: int = 256,
    target_um_per_px: float = 1.0,
    overlap_px: int = 0,
    min_tissue_fraction: float = 0.10,
) -> PatchRecordFile:
    level, level_um = pyramid.closest_finer_level(target_um_per_px)
    frame = resample_lanczos(level, level_um, target_um_per_px)
    frame_mask = mask_to_frame(mask, target_um_per_px, frame.shape[:2])
    origins = grid_origins(frame_mask, edge_px, overlap_px, min_tissue_fraction)
    patches = np.stack([frame[y : y + edge_px, x : x + edge_px, :3] for x, y in origins]) if origins else np.zeros(
        (0, edge_px, edge_px, 3), np.uint8
    )
    return PatchRecordFile(edge_px, target_um_per_px, np.array(origins, dtype=np.uint32).reshape(-1, 2), patches)


def tissue_mask_for(pyramid: RasterPyramid, params: ThresholdParams | None = None) -> TissueMask:
    level, um = pyramid.closest_finer_level(max(MASK_UM_PER_PX, pyramid.finest_um))
    target = max(MASK_UM_PER_PX, um)
    return segment_tissue_threshold(resample_lanczos(level, um, target), params, target)


# -- dihedral group D4 ---------------------------------------------------------


def dihedral_transform(patch: np.ndarray, op_index: int) -> np.ndarray:
    """Apply element ``op_index`` of D4 to a square patch (H, W, ...).

    0..3 rotate counter-clockwise by ``op_index * 90`` degrees; 4..7 apply the
    same rotation followed by a horizontal flip.
    """
    if not 0 <= op_index < 8:
        raise ValueError(f"dihedral op index must be in 0..7, got {op_index}")
    if patch.shape[0] != patch.shape[1]:
        raise ValueError("dihedral transforms need a square patch")
    out = np.rot90(patch, op_index % 4)
    if op_index >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _build_tables():
    probe = np.arange(9).reshape(3, 3)
    images = [dihedral_transform(probe, k) for k in range(8)]

    def which(img):
        return next(k for k, ref in enumerate(images) if np.array_equal(ref, img))

    compose = [[which(dihedral_transform(images[a], b)) for b in range(8)] for a in range(8)]
    inverse = [next(b for b in range(8) if compose[a][b] == 0) for a in range(8)]
    return tuple(map(tuple, compose)), tuple(inverse)


# DIHEDRAL_COMPOSE[a][b]: the single op equal to applying a, then b.
DIHEDRAL_COMPOSE, DIHEDRAL_INVERSE = _build_tables()
