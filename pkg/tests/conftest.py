import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gmb.manifest import CohortManifest, ManifestRow

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

ISUP_TO_CLINICAL = {0: ("0", "0"), 1: ("3", "3"), 2: ("3", "4"), 3: ("4", "3"), 4: ("4", "4"), 5: ("4", "5")}


def make_row(i: int, grade: int = 1, serial: str = "SN000", split: str = "development", **kw) -> ManifestRow:
    gp, gs = ISUP_TO_CLINICAL[grade]
    fields = dict(
        cohort="C1",
        original_patient_id=f"P{i}",
        original_slide_id=f"S{i}",
        filename=f"s{i}_{serial}.json",
        scanner_vendor="V",
        scanner_model="M",
        scanner_serial=serial,
        scan_timestamp=f"2024-01-01T00:{i % 60:02d}:00",
        pixel_size_um="1.0",
        label_level="slide",
        gleason_primary=gp,
        gleason_secondary=gs,
        isup=str(grade),
        split=split,
    )
    fields.update(kw)
    return ManifestRow(**fields)


def random_manifest(rng: np.random.Generator, n_slides: int = 40, n_scanners: int = 2, rescan_p: float = 0.3) -> CohortManifest:
    rows = []
    for i in range(n_slides):
        isup = int(rng.integers(6))
        home = int(rng.integers(n_scanners))
        rows.append(make_row(i, isup, f"SN{home:03d}"))
        if n_scanners > 1 and rng.random() < rescan_p:
            other = (home + 1 + int(rng.integers(n_scanners - 1))) % n_scanners
            rows.append(make_row(i, isup, f"SN{other:03d}"))
    return CohortManifest(tuple(rows))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def clean_manifest(n: int = 12) -> CohortManifest:
    """Small clean cohort: two scanners, development and validation splits, folds assigned."""
    rows = []
    for i in range(n):
        split = "development" if i < n - 3 else "internal_validation"
        fold = str(i % 2) if split == "development" else ""
        rows.append(make_row(i, i % 6, f"SN{i % 2:03d}", split, cv_fold=fold))
    return CohortManifest(tuple(rows))


def plant(m: CohortManifest, kind: str) -> CohortManifest:
    """Inject one corruption of the given kind into a clean manifest."""
    from dataclasses import replace

    rows = list(m.rows)
    if kind == "duplicate ID":
        rows.append(rows[0])
    elif kind == "partition overlap":
        src = rows[1]
        rows.append(replace(src, original_slide_id=src.original_slide_id + "b", filename="extra.json", split="internal_validation", cv_fold=""))
    elif kind == "fold overlap":
        src = rows[2]
        other = str(1 - int(src.cv_fold))
        rows.append(replace(src, original_slide_id=src.original_slide_id + "b", filename="extra.json", cv_fold=other))
    elif kind == "GS/ISUP mismatch":
        rows[3] = replace(rows[3], gleason_primary="4", gleason_secondary="4", isup="2")
    elif kind == "benign with score":
        rows[4] = replace(rows[4], gleason_primary="3", gleason_secondary="3", isup="0")
    elif kind == "stale rescan":
        src = rows[5]
        rows.append(replace(src, filename=src.filename.replace(".json", "_rescan.json"), scan_timestamp="2024-06-01T12:00:00"))
    else:
        raise KeyError(kind)
    return m.replace_rows(rows)


PLANTED_RULES = {
    "duplicate ID": "duplicate IDs",
    "partition overlap": "partition overlap",
    "fold overlap": "fold overlap",
    "GS/ISUP mismatch": "GS/ISUP mismatch",
    "benign with score": "benign with score",
    "stale rescan": "rescans",
}


def write_frozen_store(patch_dir, m: CohortManifest, dim: int = 8, n_patches: int = 5, seed: int = 0, signal: float = 1.0):
    """Patch records plus embeddings for every WSI, where embeddings encode the slide's GS codes."""
    from gmb.bags import embedding_path, patch_path
    from gmb.manifest import parse_label
    from gmb.records import EmbeddingFile, PatchRecordFile, patch_key, write_embeddings, write_patch_records

    rng = np.random.default_rng(seed)
    for r in m.rows:
        label = parse_label(r)
        origins = np.array([[4 * i, 0] for i in range(n_patches)])
        patches = rng.integers(0, 256, (n_patches, 2, 2, 3), dtype=np.uint8)
        write_patch_records(patch_path(patch_dir, r.wsi_id), PatchRecordFile(2, 1.0, origins, patches))
        keys, vecs = [], []
        for op in range(8):
            for i, (x, y) in enumerate(origins):
                v = rng.normal(0, 0.3, dim)
                if label is not None and label.score is not None:
                    code = label.score.primary.code if i % 2 == 0 else label.score.secondary.code
                    v[code] += signal
                keys.append(patch_key(x, y, op))
                vecs.append(v)
        write_embeddings(embedding_path(patch_dir, r.wsi_id), EmbeddingFile(keys, np.array(vecs)))


def write_run_config(root, synth=None, train=None, inference=None, encoder=None, paths=None, **extra):
    """Run config for a synthetic cohort under ``root``, tuned for small CPU runs."""
    import json
    from pathlib import Path

    root = Path(root)
    cfg = {
        "paths": {"manifest": "data/manifest.csv", "patch_dir": "patches", "checkpoint_dir": "ckpt", "report_dir": "reports", **(paths or {})},
        "seed": 0,
        "cv_folds": 2,
        "synth": {"n_patients": 250, "n_holdout": 50, "n_scanners": 2, **(synth or {})},
        "tiling": {"edge_px": 32, "overlap_px": 0},
        "encoder": {"mode": "frozen_file", "embed_dim": 64, **(encoder or {})},
        "train": {"lr": 1e-3, "effective_batch_wsis": 8, "patience_epochs": 20, "max_epochs": 40, **(train or {})},
        "inference": {"tta_runs": 3, "bootstrap_replicates": 200, **(inference or {})},
        **extra,
    }
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
