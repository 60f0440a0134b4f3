"""Cohort manifests: hashed identifiers, integrity checks, exclusions and CV folds.

A manifest is a CSV with one row per WSI. Identifiers are MD5 hashes of the
raw fields so that identically named patients or slides coming from different
cohorts never collide.

Violation categories reported by :func:`validate_manifest`:

=====  ===================================================================
a      identifier problems: missing, duplicated, ambiguous, stale rescans
b      patient / label-group consistency
c      slide-level consistency across rescanned WSIs
d      invalid categorical or quantitative values (incl. partial GS)
e      logical GS/ISUP mismatches
f      partition overlap between splits or between CV folds
=====  ===================================================================
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .grading import GleasonScore, GradingError, IsupGrade, gs_to_isup, parse_isup, parse_pattern

MANIFEST_HEADER = "# gmb-manifest v1"
COLUMNS = (
    "cohort",
    "original_patient_id",
    "original_slide_id",
    "filename",
    "scanner_vendor",
    "scanner_model",
    "scanner_serial",
    "scan_timestamp",
    "pixel_size_um",
    "label_level",
    "gleason_primary",
    "gleason_secondary",
    "isup",
    "group_key",
    "split",
    "cv_fold",
)
SPLITS = ("development", "tuning", "internal_validation", "external_validation")
LABEL_LEVELS = ("slide", "location", "patient")
MAX_FOLDS = 10
_ID_FIELDS = ("cohort", "original_patient_id", "original_slide_id", "filename", "scanner_serial", "scan_timestamp")
_LABEL_FIELDS = ("label_level", "gleason_primary", "gleason_secondary", "isup", "group_key")


class ManifestError(ValueError):
    pass


def _md5(*parts: str) -> str:
    return hashlib.md5("|".join(parts).encode("utf-8")).hexdigest()


def compute_ids(cohort, original_patient_id, original_slide_id, filename, scanner_serial, timestamp):
    """Return ``(patient_id, slide_id, wsi_id)`` as lowercase MD5 hex digests.

    Fields are joined with a single ``|`` byte before hashing.
    """
    named = {
        "cohort": cohort,
        "original_patient_id": original_patient_id,
        "original_slide_id": original_slide_id,
        "filename": filename,
        "scanner_serial": scanner_serial,
        "timestamp": timestamp,
    }
    for name, value in named.items():
        if value is None or str(value) == "":
            raise ManifestError(f"empty identifier field: {name}")
    return (
        _md5(cohort, original_patient_id),
        _md5(cohort, original_slide_id),
        _md5(filename, scanner_serial, timestamp),
    )


@dataclass(frozen=True)
class ManifestRow:
    cohort: str = ""
    original_patient_id: str = ""
    original_slide_id: str = ""
    filename: str = ""
    scanner_vendor: str = ""
    scanner_model: str = ""
    scanner_serial: str = ""
    scan_timestamp: str = ""
    pixel_size_um: str = ""
    label_level: str = ""
    gleason_primary: str = ""
    gleason_secondary: str = ""
    isup: str = ""
    group_key: str = ""
    split: str = ""
    cv_fold: str = ""

    @property
    def missing_id_fields(self) -> list[str]:
        return [f for f in _ID_FIELDS if not str(getattr(self, f)).strip()]

    @cached_property
    def patient_id(self) -> str:
        return _md5(self.cohort, self.original_patient_id)

    @cached_property
    def slide_id(self) -> str:
        return _md5(self.cohort, self.original_slide_id)

    @cached_property
    def wsi_id(self) -> str:
        return _md5(self.filename, self.scanner_serial, self.scan_timestamp)

    @property
    def label_tuple(self) -> tuple[str, ...]:
        return tuple(getattr(self, f) for f in _LABEL_FIELDS)

    @property
    def fold(self) -> int | None:
        return int(self.cv_fold) if self.cv_fold.strip() else None


@dataclass(frozen=True)
class WsiRecord:
    wsi_id: str
    slide_id: str
    source_filename: str
    scanner_serial: str
    scan_timestamp: str
    pixel_size_um: float


@dataclass(frozen=True)
class ReferenceLabel:
    level: str
    isup: IsupGrade
    score: GleasonScore | None = None
    group_key: str = ""


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    cohort: str
    original_slide_id: str
    reference: ReferenceLabel | None


@dataclass(frozen=True)
class PartitionAssignment:
    patient_id: str
    split: str
    cv_fold: int | None = None


@dataclass(frozen=True)
class Violation:
    category: str
    rule: str
    key: str
    detail: str = ""

    def __str__(self) -> str:
        return f"[{self.category}] {self.rule}: {self.key} {self.detail}".rstrip()


def parse_label(row: ManifestRow) -> ReferenceLabel | None:
    """Parse the reference label of a row; ``None`` for unlabeled rows.

    Raises :class:`GradingError` on malformed grading fields. Partial or
    mixed manifest scores are errors here: correction by duplication is
    for model outputs only.
    """
    if not row.label_level.strip():
        return None
    isup = parse_isup(row.isup)
    score = parse_score_fields(row.gleason_primary, row.gleason_secondary)
    return ReferenceLabel(row.label_level.strip(), isup, score, row.group_key.strip())


def parse_score_fields(primary: str, secondary: str) -> GleasonScore | None:
    gp, gs = primary.strip(), secondary.strip()
    if not (gp or gs):
        return None
    if not (gp and gs):
        raise GradingError(f"partial Gleason score {gp!r}+{gs!r}")
    return GleasonScore(parse_pattern(gp), parse_pattern(gs))


@dataclass(frozen=True)
class CohortManifest:
    rows: tuple[ManifestRow, ...]
    base_dir: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.rows)

    def replace_rows(self, rows: Iterable[ManifestRow]) -> "CohortManifest":
        return CohortManifest(tuple(rows), self.base_dir)

    def resolve(self, filename: str) -> Path:
        p = Path(filename)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def wsis(self) -> list[WsiRecord]:
        return [
            WsiRecord(r.wsi_id, r.slide_id, r.filename, r.scanner_serial, r.scan_timestamp, float(r.pixel_size_um))
            for r in self.rows
        ]

    def slides(self) -> dict[str, SlideRecord]:
        out = {}
        for r in self.rows:
            if r.slide_id not in out:
                out[r.slide_id] = SlideRecord(r.slide_id, r.patient_id, r.cohort, r.original_slide_id, parse_label(r))
        return out

    def rows_by_slide(self) -> dict[str, list[ManifestRow]]:
        out: dict[str, list[ManifestRow]] = defaultdict(list)
        for r in self.rows:
            out[r.slide_id].append(r)
        return dict(out)

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.rows})

    def assignments(self) -> dict[str, PartitionAssignment]:
        out = {}
        for r in self.rows:
            out.setdefault(r.patient_id, PartitionAssignment(r.patient_id, r.split, r.fold))
        return out

    def scanners(self) -> dict[str, tuple[str, str]]:
        return {r.scanner_serial: (r.scanner_vendor, r.scanner_model) for r in self.rows}

    def select(self, predicate) -> "CohortManifest":
        return self.replace_rows(r for r in self.rows if predicate(r))


# -- I/O ---------------------------------------------------------------------


def read_manifest(path) -> CohortManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, base_dir=path.parent)


def parse_manifest(text: str, base_dir: Path | None = None) -> CohortManifest:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"missing or unsupported manifest version line (expected {MANIFEST_HEADER!r})")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ManifestError(f"manifest columns must be exactly {', '.join(COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=3):
        if None in rec or any(v is None for v in rec.values()):
            raise ManifestError(f"line {lineno}: wrong number of fields")
        rows.append(ManifestRow(**{k: v.strip() for k, v in rec.items()}))
    return CohortManifest(tuple(rows), base_dir)


def format_manifest(m: CohortManifest) -> str:
    buf = io.StringIO()
    buf.write(MANIFEST_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in m.rows:
        writer.writerow([getattr(r, c) for c in COLUMNS])
    return buf.getvalue()


def write_manifest(m: CohortManifest, path) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


# -- validation ----------------------------------------------------------------


def _row_value_problems(r: ManifestRow) -> list[tuple[str, str]]:
    """(rule, detail) pairs for category-d problems of one row."""
    problems = []
    if r.split not in SPLITS:
        problems.append(("invalid value", f"split={r.split!r}"))
    try:
        if not float(r.pixel_size_um) > 0:
            raise ValueError
    except ValueError:
        problems.append(("invalid value", f"pixel_size_um={r.pixel_size_um!r}"))
    if r.scan_timestamp:
        try:
            datetime.fromisoformat(r.scan_timestamp)
        except ValueError:
            problems.append(("invalid value", f"scan_timestamp={r.scan_timestamp!r}"))
    if r.cv_fold:
        try:
            fold = int(r.cv_fold)
        except ValueError:
            fold = -1
        if not 0 <= fold < MAX_FOLDS:
            problems.append(("invalid value", f"cv_fold={r.cv_fold!r}"))
        elif r.split != "development":
            problems.append(("invalid value", f"cv_fold set for split {r.split!r}"))
    level = r.label_level
    if level and level not in LABEL_LEVELS:
        problems.append(("invalid value", f"label_level={level!r}"))
    elif level:
        if level != "slide" and not r.group_key:
            problems.append(("invalid value", "group_key missing for non-slide label"))
        try:
            parse_isup(r.isup)
        except GradingError:
            problems.append(("invalid value", f"isup={r.isup!r}"))
        try:
            parse_score_fields(r.gleason_primary, r.gleason_secondary)
        except GradingError as exc:
            problems.append(("partial GS", str(exc)))
    elif any((r.gleason_primary, r.gleason_secondary, r.isup)):
        problems.append(("invalid value", "grading fields without label_level"))
    return problems


def _label_problem(r: ManifestRow) -> tuple[str, str] | None:
    try:
        label = parse_label(r)
    except GradingError:
        return None  # reported under category d
    if label is None or label.score is None:
        return None
    if label.isup.grade == 0 and not label.score.is_benign:
        return "benign with score", f"isup 0 with GS {label.score}"
    if gs_to_isup(label.score) != label.isup:
        return "GS/ISUP mismatch", f"GS {label.score} vs ISUP {label.isup.grade}"
    return None


def _stale_rescans(rows: Iterable[ManifestRow]) -> dict[tuple[str, str], list[ManifestRow]]:
    groups: dict[tuple[str, str], dict[str, ManifestRow]] = defaultdict(dict)
    for r in rows:
        groups[(r.slide_id, r.scanner_serial)].setdefault(r.wsi_id, r)
    return {k: list(v.values()) for k, v in groups.items() if len(v) > 1}


def validate_manifest(m: CohortManifest) -> list[Violation]:
    """Return every integrity violation; empty list iff the manifest is clean."""
    out: list[Violation] = []
    rows = list(m.rows)
    with_ids = []
    for r in rows:
        missing = r.missing_id_fields
        if missing:
            out.append(Violation("a", "missing IDs", r.filename or "<no filename>", ",".join(missing)))
        else:
            with_ids.append(r)

    # (a) uniqueness / unambiguity
    by_wsi: dict[str, list[ManifestRow]] = defaultdict(list)
    patients_of_slide: dict[str, set[str]] = defaultdict(set)
    for r in with_ids:
        by_wsi[r.wsi_id].append(r)
        patients_of_slide[r.slide_id].add(r.patient_id)
    for wsi_id, rs in by_wsi.items():
        if len(rs) > 1:
            out.append(Violation("a", "duplicate IDs", wsi_id, f"{len(rs)} rows share filename/serial/timestamp"))
    ambiguous = {s for s, ps in patients_of_slide.items() if len(ps) > 1}
    for s in sorted(ambiguous):
        out.append(Violation("a", "ambiguous IDs", s, "slide linked to several patients"))
    for (slide_id, serial), rs in sorted(_stale_rescans(with_ids).items()):
        out.append(Violation("a", "rescans", slide_id, f"{len(rs)} scans on scanner {serial}"))

    # (b) patient / group consistency
    by_patient: dict[str, list[ManifestRow]] = defaultdict(list)
    for r in with_ids:
        by_patient[r.patient_id].append(r)
    for pid, rs in by_patient.items():
        levels = {r.label_level for r in rs if r.label_level}
        if len(levels) > 1:
            out.append(Violation("b", "patient label level", pid, f"levels {sorted(levels)}"))
            continue
        groups: dict[str, set] = defaultdict(set)
        for r in rs:
            if r.label_level in ("location", "patient"):
                key = "*" if r.label_level == "patient" else r.group_key
                groups[key].add(r.label_tuple)
        for key, labels in groups.items():
            if len(labels) > 1:
                out.append(Violation("b", "group label conflict", pid, f"group {key!r} has {len(labels)} labels"))

    # (c) slide consistency across WSIs
    by_slide: dict[str, list[ManifestRow]] = defaultdict(list)
    for r in with_ids:
        by_slide[r.slide_id].append(r)
    for sid, rs in by_slide.items():
        if sid in ambiguous:
            continue
        if len({r.label_tuple for r in rs}) > 1:
            out.append(Violation("c", "slide label conflict", sid, f"{len(rs)} WSIs disagree"))

    # (d) values
    for r in rows:
        for rule, detail in _row_value_problems(r):
            out.append(Violation("d", rule, r.filename or "<no filename>", detail))

    # (e) GS/ISUP logic, once per slide
    seen = set()
    for r in rows:
        problem = _label_problem(r)
        if problem and (r.slide_id, problem[0]) not in seen:
            seen.add((r.slide_id, problem[0]))
            out.append(Violation("e", problem[0], r.slide_id, problem[1]))

    # (f) partitions
    for pid, rs in by_patient.items():
        splits = {r.split for r in rs}
        if len(splits) > 1:
            out.append(Violation("f", "partition overlap", pid, f"splits {sorted(splits)}"))
        folds = {r.cv_fold for r in rs if r.split == "development" and r.cv_fold}
        if len(folds) > 1:
            out.append(Violation("f", "fold overlap", pid, f"folds {sorted(folds)}"))
    return out


# -- exclusions ----------------------------------------------------------------


def apply_exclusions(m: CohortManifest) -> tuple[CohortManifest, list[dict]]:
    """Drop records matching manifest-level exclusion rules.

    Returns the filtered manifest and a log with one dict per dropped WSI row.
    Earlier scans of a slide on the same scanner instrument are dropped in
    favour of the latest timestamp.
    """
    log: list[dict] = []
    keep: list[ManifestRow] = []

    def drop(r: ManifestRow, rule: str, detail: str = "") -> None:
        log.append({"rule": rule, "filename": r.filename, "wsi_id": r.wsi_id, "slide_id": r.slide_id, "detail": detail})

    bad_slides: dict[str, tuple[str, str]] = {}
    for r in m.rows:
        problem = _label_problem(r)
        if problem:
            bad_slides.setdefault(r.slide_id, problem)

    for r in m.rows:
        missing = r.missing_id_fields
        if missing:
            drop(r, "missing IDs", ",".join(missing))
            continue
        problems = _row_value_problems(r)
        if problems:
            rule, detail = next(((a, b) for a, b in problems if a == "partial GS"), problems[0])
            drop(r, rule, detail)
            continue
        if r.slide_id in bad_slides:
            drop(r, *bad_slides[r.slide_id])
            continue
        keep.append(r)

    counts: dict[str, int] = defaultdict(int)
    patients_of_slide: dict[str, set[str]] = defaultdict(set)
    for r in keep:
        counts[r.wsi_id] += 1
        patients_of_slide[r.slide_id].add(r.patient_id)
    survivors = []
    for r in keep:
        if counts[r.wsi_id] > 1:
            drop(r, "duplicate IDs", f"{counts[r.wsi_id]} rows")
        elif len(patients_of_slide[r.slide_id]) > 1:
            drop(r, "ambiguous IDs", "slide linked to several patients")
        else:
            survivors.append(r)

    stale = set()
    for rs in _stale_rescans(survivors).values():
        latest = max(rs, key=lambda r: datetime.fromisoformat(r.scan_timestamp))
        stale.update(r.wsi_id for r in rs if r is not latest)
    final = []
    for r in survivors:
        if r.wsi_id in stale:
            drop(r, "rescans", f"earlier scan on {r.scanner_serial}")
        else:
            final.append(r)
    return m.replace_rows(final), log


def write_exclusion_log(log: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# -- folds -------------------------------------------------------------------


def patient_max_isup(m: CohortManifest) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in m.rows:
        label = parse_label(r)
        if label is not None:
            out[r.patient_id] = max(out.get(r.patient_id, 0), label.isup.grade)
    return out


def make_cv_folds(m: CohortManifest, k: int, seed: int) -> CohortManifest:
    """Assign stratified CV folds to development patients.

    Strata are (cohort, maximum ISUP over the patient's labels). Patients in a
    stratum are shuffled and dealt round-robin, continuing the dealing
    position across strata so global fold sizes stay balanced as well.
    """
    if k < 2 or k > MAX_FOLDS:
        raise ManifestError(f"k must be in 2..{MAX_FOLDS}, got {k}")
    dev = [r for r in m.rows if r.split == "development"]
    dev_patients = sorted({r.patient_id for r in dev})
    if k > len(dev_patients):
        raise ManifestError(f"k={k} exceeds the number of development patients ({len(dev_patients)})")
    max_isup = patient_max_isup(m.select(lambda r: r.split == "development"))
    cohort_of = {r.patient_id: r.cohort for r in dev}
    unlabeled = [p for p in dev_patients if p not in max_isup]
    if unlabeled:
        raise ManifestError(f"{len(unlabeled)} development patients have no labeled slide")

    strata: dict[tuple[str, int], list[str]] = defaultdict(list)
    for p in dev_patients:
        strata[(cohort_of[p], max_isup[p])].append(p)
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    offset = 0
    for key in sorted(strata):
        members = strata[key]
        order = rng.permutation(len(members))
        for i, j in enumerate(order):
            fold_of[members[j]] = (offset + i) % k
        offset += len(members)
    rows = [replace(r, cv_fold=str(fold_of[r.patient_id])) if r.split == "development" else r for r in m.rows]
    return m.replace_rows(rows)
