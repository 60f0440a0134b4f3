"""Synthetic biopsy cohorts with known ground truth, for desk-scale experiments.

A slide is a grid of square cells, each either background or tissue of one
pattern class (0 benign, 1..3 for patterns 3..5). Classes differ in colour
and texture; each scanner applies its own colour transform. The class map
of every slide is stored in its sidecar so the ground truth stays inspectable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from PIL import Image

from .grading import GS_ORDINAL_TABLE, GleasonScore, decode_gs_ordinal, gs_to_isup
from .manifest import CohortManifest, ManifestRow, write_manifest
from .tiling import MASK_UM_PER_PX, dihedral_transform, resample_lanczos

BACKGROUND = -1
BACKGROUND_RGB = (246, 246, 246)
# base colour per class; benign is pale pink, higher patterns darker and bluer
CLASS_RGB = np.array([[228, 178, 200], [186, 118, 182], [140, 76, 160], [96, 44, 128]], dtype=np.float64)
ORACLE_FEATURES = 8
ORACLE_PROJECTION_SEED = 20240611


@dataclass(frozen=True)
class Scanner:
    vendor: str
    model: str
    serial: str
    gain: tuple[float, float, float]
    offset: tuple[float, float, float]


def default_scanners(n: int) -> list[Scanner]:
    rng = np.random.default_rng(7)
    out = []
    for i in range(n):
        gain = (1.0, 1.0, 1.0) if i == 0 else tuple(float(g) for g in rng.uniform(0.9, 1.1, 3))
        offset = (0.0, 0.0, 0.0) if i == 0 else tuple(float(o) for o in rng.uniform(-12, 12, 3))
        out.append(Scanner(f"Vendor{chr(65 + i)}", f"M{100 + i}", f"SN{i:03d}", gain, offset))
    return out


@dataclass
class SynthConfig:
    n_patients: int = 250
    n_holdout: int = 50
    n_scanners: int = 2
    grade_mixture: list[float] = field(default_factory=lambda: [1 / 6] * 6)
    rescan_fraction: float = 0.2
    grid: int = 6
    cell_px: int = 32
    pixel_noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 2:
            raise ValueError("n_patients must be at least 2")
        if not 0 <= self.n_holdout < self.n_patients:
            raise ValueError("n_holdout must be in [0, n_patients)")
        if self.n_scanners < 1:
            raise ValueError("need at least one scanner")
        mix = np.asarray(self.grade_mixture, dtype=float)
        if mix.shape != (6,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ValueError("grade_mixture must be six non-negative weights over ISUP 0..5")
        if self.grid < 3:
            raise ValueError("grid must be at least 3 cells wide")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def sample_score(isup: int, rng: np.random.Generator) -> GleasonScore:
    options = [decode_gs_ordinal(i) for i in range(len(GS_ORDINAL_TABLE)) if gs_to_isup(decode_gs_ordinal(i)).grade == isup]
    return options[int(rng.integers(len(options)))]


def sample_class_map(score: GleasonScore, grid: int, rng: np.random.Generator) -> np.ndarray:
    """Cell classes whose two most frequent non-benign classes reproduce ``score``."""
    n = grid * grid
    n_bg = int(rng.integers(0, grid + 1))
    classes = np.zeros(n - n_bg, dtype=int)
    if not score.is_benign:
        p, s = score.primary.code, score.secondary.code
        tissue = len(classes)
        if p == s:
            n_p = int(rng.integers(tissue // 4, tissue // 2 + 1))
            classes[:n_p] = p
        else:
            n_p = int(rng.integers(tissue // 4 + 2, tissue // 2 + 1))
            n_s = int(rng.integers(max(2, n_p // 4), n_p // 2 + 1))
            classes[:n_p] = p
            classes[n_p : n_p + n_s] = s
    cells = np.concatenate([classes, np.full(n_bg, BACKGROUND)])
    return rng.permutation(cells).reshape(grid, grid)


def label_from_class_map(cmap: np.ndarray) -> GleasonScore:
    """Primary = most frequent non-benign class, secondary = the runner-up (or the primary again)."""
    counts = np.bincount(cmap[cmap > 0].ravel(), minlength=4)
    if counts.sum() == 0:
        return GleasonScore.benign()
    order = sorted(range(1, 4), key=lambda c: (-counts[c], -c))
    p = order[0]
    s = order[1] if counts[order[1]] > 0 else p
    return GleasonScore.from_codes(p, s)


def _texture(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if cls == 0:
        t = np.zeros((size, size))
    elif cls == 1:
        t = 14.0 * np.sign(np.sin(2 * np.pi * (xx + yy) / 8.0))
    elif cls == 2:
        t = -22.0 * (((xx % 6) < 3) & ((yy % 6) < 3))
    else:
        t = rng.normal(0.0, 18.0, (size, size))
    return t


def render_slide(cmap: np.ndarray, cell_px: int, scanner: Scanner, noise: float, rng: np.random.Generator) -> np.ndarray:
    g = cmap.shape[0]
    img = np.empty((g * cell_px, g * cell_px, 3), dtype=np.float64)
    for i in range(g):
        for j in range(g):
            c = int(cmap[i, j])
            block = img[i * cell_px : (i + 1) * cell_px, j * cell_px : (j + 1) * cell_px]
            if c == BACKGROUND:
                block[:] = BACKGROUND_RGB
                continue
            block[:] = CLASS_RGB[c] + rng.normal(0.0, 6.0, 3)
            block += _texture(c, cell_px, rng)[..., None]
    img += rng.normal(0.0, noise, img.shape)
    tissue = np.repeat(np.repeat(cmap != BACKGROUND, cell_px, 0), cell_px, 1)
    shifted = img * np.asarray(scanner.gain) + np.asarray(scanner.offset)
    img = np.where(tissue[..., None], shifted, img)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pyramid(img: np.ndarray, stem: Path, extra: dict) -> Path:
    """Write a two-level PNG pyramid (1.0 and 8.0 um/px) and its JSON sidecar."""
    stem.parent.mkdir(parents=True, exist_ok=True)
    low = resample_lanczos(img, 1.0, MASK_UM_PER_PX)
    Image.fromarray(img).save(stem.with_name(stem.name + "_l0.png"))
    Image.fromarray(low).save(stem.with_name(stem.name + "_l1.png"))
    sidecar = stem.with_suffix(".json")
    meta = {
        "pixel_size_um": 1.0,
        "levels": [
            {"file": stem.name + "_l0.png", "pixel_size_um": 1.0},
            {"file": stem.name + "_l1.png", "pixel_size_um": MASK_UM_PER_PX},
        ],
        **extra,
    }
    sidecar.write_text(json.dumps(meta, sort_keys=True) + "\n")
    return sidecar


def generate_cohort(cfg: SynthConfig, out_dir, cohort: str = "SYN", manifest_name: str = "manifest.csv") -> CohortManifest:
    """Render a cohort under ``out_dir`` and return its (unfolded) manifest.

    Each patient has one slide scanned on a random home scanner. A fraction
    of slides is rescanned on another scanner. The last ``n_holdout``
    patients form the internal validation split.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    scanners = default_scanners(cfg.n_scanners)
    mix = np.asarray(cfg.grade_mixture, dtype=float)
    mix = mix / mix.sum()
    t0 = datetime(2024, 1, 1)
    rows = []
    n_dev = cfg.n_patients - cfg.n_holdout
    for pi in range(cfg.n_patients):
        isup = int(rng.choice(6, p=mix))
        score = sample_score(isup, rng)
        cmap = sample_class_map(score, cfg.grid, rng)
        assert label_from_class_map(cmap) == score
        home = int(rng.integers(cfg.n_scanners))
        scans = [home]
        if cfg.n_scanners > 1 and rng.random() < cfg.rescan_fraction:
            scans.append(int((home + rng.integers(1, cfg.n_scanners)) % cfg.n_scanners))
        patient, slide = f"P{pi:04d}", f"S{pi:04d}"
        split = "development" if pi < n_dev else "internal_validation"
        for si, sc in enumerate(scans):
            scanner = scanners[sc]
            img = render_slide(cmap, cfg.cell_px, scanner, cfg.pixel_noise, rng)
            stem = out_dir / "slides" / f"{slide}_{scanner.serial}"
            sidecar = write_pyramid(img, stem, {"class_map": cmap.tolist(), "gleason": str(score)})
            rows.append(
                ManifestRow(
                    cohort=cohort,
                    original_patient_id=patient,
                    original_slide_id=slide,
                    filename=str(sidecar.relative_to(out_dir)),
                    scanner_vendor=scanner.vendor,
                    scanner_model=scanner.model,
                    scanner_serial=scanner.serial,
                    scan_timestamp=(t0 + timedelta(minutes=2 * pi + si)).isoformat(),
                    pixel_size_um="1.0",
                    label_level="slide",
                    gleason_primary=str(score.primary.clinical),
                    gleason_secondary=str(score.secondary.clinical),
                    isup=str(gs_to_isup(score).grade),
                    split=split,
                )
            )
    m = CohortManifest(tuple(rows), out_dir)
    write_manifest(m, out_dir / manifest_name)
    return m


# -- oracle embedder -----------------------------------------------------------


def _features(patches: np.ndarray) -> np.ndarray:
    """(N, 8): channel means, channel stds, mean |dx| and |dy| of luma, all on the unit scale."""
    x = patches.astype(np.float64) / 255.0
    mean = x.mean(axis=(1, 2))
    std = x.std(axis=(1, 2))
    luma = x @ np.array([0.299, 0.587, 0.114])
    gx = np.abs(np.diff(luma, axis=2)).mean(axis=(1, 2))
    gy = np.abs(np.diff(luma, axis=1)).mean(axis=(1, 2))
    return np.column_stack([mean - 0.5, 4 * std, 4 * gx, 4 * gy])


def _projection(dim: int) -> np.ndarray:
    return np.random.default_rng(ORACLE_PROJECTION_SEED).normal(0.0, 1.0, (ORACLE_FEATURES, dim)) * (3.0 / np.sqrt(ORACLE_FEATURES))


def oracle_embed(patches: np.ndarray, dim: int = 64, noise: float = 0.05) -> np.ndarray:
    """Deterministic stand-in for a frozen foundation-model encoder.

    A fixed random projection of colour and texture statistics squashed by
    tanh, plus Gaussian noise seeded by the patch bytes, so identical pixels
    always map to identical vectors.
    """
    patches = np.asarray(patches)
    if len(patches) == 0:
        return np.zeros((0, dim), np.float32)
    out = np.tanh(_features(patches) @ _projection(dim))
    if noise:
        for i, p in enumerate(patches):
            seed = int(hashlib.md5(np.ascontiguousarray(p).tobytes()).hexdigest()[:16], 16)
            out[i] += np.random.default_rng(seed).normal(0.0, noise, dim)
    return out.astype(np.float32)


def oracle_embed_all_ops(patches: np.ndarray, dim: int = 64, noise: float = 0.05) -> np.ndarray:
    """(8, N, dim) embeddings of every patch under every dihedral op."""
    return np.stack([oracle_embed(np.stack([dihedral_transform(p, op) for p in patches]) if len(patches) else patches, dim, noise) for op in range(8)])
