"""Ensemble x TTA majority-vote prediction, unit pooling and patch heatmaps."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .bags import BagStore
from .grading import GleasonScore, decode_gs_ordinal, encode_gs_ordinal, gs_to_isup
from .manifest import CohortManifest, ReferenceLabel, parse_label
from .model import GatedAbmil, ModelError, predict_patterns

PATCH_BATCH = 64
PREDICTION_COLUMNS = ("unit_key", "level", "winner_gs", "winner_isup", "malignancy", "votes")
HEATMAP_COLUMNS = ("x", "y", "p_benign", "p3", "p4", "p5")


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionUnit:
    unit_key: str
    wsi_ids: tuple[str, ...]
    level: str
    cohort: str = ""
    reference: ReferenceLabel | None = None

    def __post_init__(self):
        if not self.wsi_ids:
            raise InferenceError(f"unit {self.unit_key} has no WSIs")


@dataclass
class VoteRecord:
    votes: list[int]
    winner: GleasonScore
    malignancy: float

    @property
    def winner_isup(self) -> int:
        return gs_to_isup(self.winner).grade


def majority_vote(votes: Sequence[int]) -> int:
    """Most frequent GS ordinal; ties go to the higher (more severe) ordinal."""
    if not len(votes):
        raise InferenceError("no votes")
    counts = Counter(int(v) for v in votes)
    best = max(counts.values())
    return max(v for v, c in counts.items() if c == best)


def group_units(m: CohortManifest, one_wsi_per_slide: bool = False, seed: int = 0) -> list[PredictionUnit]:
    """Prediction units sharing one reference label.

    Slide-level labels give one unit per slide; location- and patient-level
    labels give one unit per label group with all of its WSIs. With
    ``one_wsi_per_slide`` a single WSI is drawn per slide, as done when a
    validation cohort contains rescans.
    """
    rng = np.random.default_rng(seed)
    levels = defaultdict(set)
    members: dict[tuple[str, str], list] = defaultdict(list)
    labels: dict[tuple[str, str], ReferenceLabel] = {}
    for r in m.rows:
        label = parse_label(r)
        if label is None:
            raise InferenceError(f"WSI {r.wsi_id} ({r.filename}) has no reference label")
        levels[r.cohort].add(label.level)
        if label.level == "slide":
            key = r.slide_id
        elif label.level == "location":
            key = f"{r.patient_id}/{label.group_key}"
        else:
            key = r.patient_id
        members[(r.cohort, key)].append(r)
        labels[(r.cohort, key)] = label
    mixed = {c: sorted(v) for c, v in levels.items() if len(v) > 1}
    if mixed:
        raise InferenceError(f"cohorts with mixed label levels: {mixed}")

    units = []
    for cohort, key in sorted(members):
        rows = members[(cohort, key)]
        if one_wsi_per_slide:
            by_slide = defaultdict(list)
            for r in rows:
                by_slide[r.slide_id].append(r.wsi_id)
            wsi_ids = [sorted(w)[int(rng.integers(len(w)))] for _, w in sorted(by_slide.items())]
        else:
            wsi_ids = sorted({r.wsi_id for r in rows})
        label = labels[(cohort, key)]
        units.append(PredictionUnit(key, tuple(wsi_ids), label.level, cohort, label))
    return units


def _unit_seed(seed: int, unit_key: str, model_index: int, tta_index: int) -> np.random.Generator:
    key = int(hashlib.md5(unit_key.encode()).hexdigest()[:8], 16)
    return np.random.default_rng([int(seed), key, model_index, tta_index])


def predict_unit(
    models: Sequence[GatedAbmil],
    unit: PredictionUnit,
    store: BagStore,
    tta_runs: int = 3,
    seed: int = 0,
    ops: Sequence[int] = tuple(range(8)),
) -> VoteRecord:
    """Majority vote over ``len(models) * tta_runs`` corrected Gleason scores.

    Every (model, TTA run) pair draws an independent dihedral op per patch
    from ``ops``. Patches are encoded in chunks of 64. The malignancy score
    is the mean over votes of one minus the primary head's benign probability.
    """
    if tta_runs < 1:
        raise InferenceError("tta_runs must be >= 1")
    n = sum(store.count(w) for w in unit.wsi_ids)
    if n == 0:
        raise InferenceError(f"unit {unit.unit_key} has an empty bag")
    ops = np.asarray(ops)
    votes, malignancy = [], []
    with torch.no_grad():
        for mi, model in enumerate(models):
            for t in range(tta_runs):
                chosen = ops[_unit_seed(seed, unit.unit_key, mi, t).integers(0, len(ops), size=n)]
                bag = store.unit_bag(unit.wsi_ids, chosen)
                try:
                    fwd = model.aggregate(model.encode_batched(bag, PATCH_BATCH))
                except ModelError as exc:
                    raise InferenceError(f"model {mi} cannot consume unit {unit.unit_key}: {exc}") from exc
                votes.append(encode_gs_ordinal(predict_patterns(fwd)))
                malignancy.append(1.0 - float(fwd.probs_primary[0]))
    return VoteRecord(votes, decode_gs_ordinal(majority_vote(votes)), float(np.mean(malignancy)))


def heatmap(model: GatedAbmil, store: BagStore, wsi_id: str) -> np.ndarray:
    """Rows of (x, y, p_benign, p3, p4, p5) from the primary head for every patch."""
    origins = store.origins(wsi_id)
    if len(origins) == 0:
        return np.zeros((0, 6))
    probs, _ = model.forward_patches(store.bag(wsi_id), PATCH_BATCH)
    return np.column_stack([origins.astype(float), probs.astype(float)])


def write_heatmap(rows: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_COLUMNS)
        for r in rows:
            w.writerow([int(r[0]), int(r[1])] + [f"{v:.6f}" for v in r[2:]])


def write_predictions(units: Sequence[PredictionUnit], records: Sequence[VoteRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for u, rec in zip(units, records):
            w.writerow(
                [u.unit_key, u.level, str(rec.winner), rec.winner_isup, f"{rec.malignancy:.6f}", ";".join(map(str, rec.votes))]
            )


def read_predictions(path) -> dict[str, dict]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
            raise InferenceError(f"{path}: unexpected prediction columns {reader.fieldnames}")
        for row in reader:
            votes = [int(v) for v in row["votes"].split(";") if v]
            out[row["unit_key"]] = {
                "level": row["level"],
                "winner_gs": row["winner_gs"],
                "winner_ordinal": majority_vote(votes),
                "winner_isup": int(row["winner_isup"]),
                "malignancy": float(row["malignancy"]),
                "votes": votes,
            }
    return out
