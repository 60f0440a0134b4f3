"""Agreement and diagnostic statistics with percentile-bootstrap confidence intervals.

Kappas use Cohen's definition (each rater's own marginals for the chance
matrix) over a category count fixed in advance: 6 for ISUP grades, 10 for
ordinal-encoded Gleason scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .grading import IsupGrade, is_significant_error

ISUP_CATEGORIES = 6
GS_CATEGORIES = 10
WEIGHTINGS = ("none", "linear", "quadratic")


class UndefinedMetric(ValueError):
    """The statistic has a zero denominator on this input."""


@dataclass(frozen=True)
class PairedRatings:
    reference: np.ndarray
    predicted: np.ndarray
    category_count: int

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.int64)
        pred = np.asarray(self.predicted, dtype=np.int64)
        if ref.shape != pred.shape or ref.ndim != 1 or len(ref) == 0:
            raise ValueError("ratings must be equal-length non-empty 1-d sequences")
        if ref.min() < 0 or pred.min() < 0 or max(ref.max(), pred.max()) >= self.category_count:
            raise ValueError(f"ratings must lie in 0..{self.category_count - 1}")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "predicted", pred)


def confusion_matrix(reference, predicted, category_count: int) -> np.ndarray:
    r = PairedRatings(reference, predicted, category_count)
    c = category_count
    return np.bincount(r.reference * c + r.predicted, minlength=c * c).reshape(c, c)


def kappa_weights(category_count: int, weighting: str) -> np.ndarray:
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    i, j = np.indices((category_count, category_count))
    if weighting == "none":
        return (i != j).astype(float)
    d = np.abs(i - j) / max(category_count - 1, 1)
    return d if weighting == "linear" else d**2


def cohen_kappa(reference, predicted, category_count: int | None = None, weighting: str = "quadratic") -> float:
    """Cohen's kappa, ``1 - sum(W*O) / sum(W*E)``.

    Raises :class:`UndefinedMetric` when the expected disagreement is zero,
    i.e. both raters give the same single category throughout.
    """
    if category_count is None:
        category_count = int(max(np.max(reference), np.max(predicted))) + 1
    observed = confusion_matrix(reference, predicted, category_count).astype(float)
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    w = kappa_weights(category_count, weighting)
    denom = (w * expected).sum()
    if denom == 0:
        raise UndefinedMetric("kappa undefined: zero expected disagreement")
    return float(1.0 - (w * observed).sum() / denom)


def qwk(reference, predicted, category_count: int | None = None) -> float:
    return cohen_kappa(reference, predicted, category_count, "quadratic")


def sens_spec(reference_binary, predicted_binary) -> tuple[float | None, float | None]:
    """(sensitivity, specificity); ``None`` marks a value with no cases to define it."""
    ref = np.asarray(reference_binary, dtype=bool)
    pred = np.asarray(predicted_binary, dtype=bool)
    if ref.shape != pred.shape:
        raise ValueError("length mismatch")
    tp = int(np.sum(ref & pred))
    fn = int(np.sum(ref & ~pred))
    tn = int(np.sum(~ref & ~pred))
    fp = int(np.sum(~ref & pred))
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return sens, spec


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lower: float
    upper: float
    replicates: int
    undefined: int = 0


def bootstrap_ci(
    data: Sequence[np.ndarray],
    metric: Callable[..., float],
    replicates: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Percentile bootstrap over cases.

    ``data`` is a sequence of equal-length arrays indexed by case; each
    replicate resamples case indices with replacement and calls
    ``metric(*arrays)``. Replicates where the metric raises
    :class:`UndefinedMetric` (or returns ``None``/NaN) are discarded and
    counted; more than half undefined is an error.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    arrays = [np.asarray(a) for a in data]
    n = len(arrays[0])
    if n == 0 or any(len(a) != n for a in arrays):
        raise ValueError("bootstrap data must be equal-length and non-empty")
    point = metric(*arrays)
    if point is None or np.isnan(point):
        raise UndefinedMetric("metric undefined on the full sample")
    # one index row per replicate, drawn up front so evaluation order never matters
    idx = np.random.default_rng(seed).integers(0, n, size=(replicates, n))
    values = []
    for row in idx:
        try:
            v = metric(*(a[row] for a in arrays))
        except UndefinedMetric:
            continue
        if v is not None and not np.isnan(v):
            values.append(v)
    undefined = replicates - len(values)
    if undefined * 2 > replicates:
        raise UndefinedMetric(f"{undefined} of {replicates} bootstrap replicates undefined")
    tail = (1 - level) / 2 * 100
    lower, upper = np.percentile(values, [tail, 100 - tail])
    return BootstrapResult(float(point), float(lower), float(upper), replicates, undefined)


# -- concordance harnesses -----------------------------------------------------


def panel_pairwise(
    panel: Mapping[str, Sequence[int]], ai_names=(), category_count: int = ISUP_CATEGORIES
) -> dict[str, float]:
    """Mean pairwise QWK of each panel member against the pathologists other than itself.

    AI members never enter anyone else's mean. Undefined pairs are skipped
    with a warning.
    """
    if len(panel) < 3:
        raise ValueError("panel needs at least 3 members")
    lengths = {len(v) for v in panel.values()}
    if len(lengths) != 1:
        raise ValueError("panel ratings are not aligned")
    ai = set(ai_names)
    pathologists = [name for name in panel if name not in ai]
    out = {}
    for name, ratings in panel.items():
        vals = []
        for other in pathologists:
            if other == name:
                continue
            try:
                vals.append(qwk(panel[other], ratings, category_count))
            except UndefinedMetric:
                warnings.warn(f"QWK undefined for pair ({name}, {other}); pair excluded")
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return out


@dataclass
class CrossScannerResult:
    pairs: dict[tuple[str, str], float]
    mean: float

    def matrix(self) -> tuple[list[str], np.ndarray]:
        names = sorted({n for pair in self.pairs for n in pair})
        m = np.eye(len(names))
        for (a, b), v in self.pairs.items():
            i, j = names.index(a), names.index(b)
            m[i, j] = m[j, i] = v
        return names, m


def cross_scanner(predictions: Mapping[str, Mapping[str, int]], category_count: int = ISUP_CATEGORIES) -> CrossScannerResult:
    """Pairwise QWK between scanners on the same slides, plus the mean over pairs."""
    if len(predictions) < 2:
        raise ValueError("need at least two scanners")
    scanners = sorted(predictions)
    slides = sorted(predictions[scanners[0]])
    for s in scanners[1:]:
        if set(predictions[s]) != set(slides):
            raise ValueError(f"scanner {s!r} covers a different slide set")
    pairs = {}
    for a, b in combinations(scanners, 2):
        pairs[(a, b)] = qwk([predictions[a][k] for k in slides], [predictions[b][k] for k in slides], category_count)
    return CrossScannerResult(pairs, float(np.mean(list(pairs.values()))))


@dataclass(frozen=True)
class AuditRow:
    slide_id: str
    reference_isup: int
    predicted_isup: int
    rule: str


@dataclass
class AuditReport:
    tables: dict[str, list[AuditRow]]
    evaluated: dict[str, int]
    common: list[str] = field(default_factory=list)

    def rate(self, model: str) -> float:
        return len(self.tables[model]) / self.evaluated[model] if self.evaluated[model] else 0.0


def _error_rule(ref: int, pred: int) -> str:
    return "ISUP>=2 predicted benign" if ref >= 2 else "benign predicted ISUP>=2"


def significant_error_audit(
    reference: Mapping[str, int], predictions: Mapping[str, Mapping[str, int]]
) -> AuditReport:
    """Clinically significant errors per prediction set and the slides common to all sets.

    ``predictions`` maps a model name to its slide -> ISUP predictions;
    only slides present in ``reference`` are evaluated.
    """
    tables, evaluated = {}, {}
    for model, preds in predictions.items():
        rows = []
        keys = sorted(k for k in preds if k in reference)
        for k in keys:
            ref, pred = int(reference[k]), int(preds[k])
            if is_significant_error(IsupGrade(ref), IsupGrade(pred)):
                rows.append(AuditRow(k, ref, pred, _error_rule(ref, pred)))
        tables[model] = rows
        evaluated[model] = len(keys)
    sets = [{r.slide_id for r in rows} for rows in tables.values()]
    common = sorted(set.intersection(*sets)) if sets else []
    return AuditReport(tables, evaluated, common)


# -- per-cohort report -----------------------------------------------------------


@dataclass(frozen=True)
class EvalCase:
    cohort: str
    level: str
    unit_key: str
    ref_isup: int
    pred_isup: int
    pred_gs: int
    malignancy: float
    ref_gs: int | None = None


def _ci(data, metric, replicates, seed) -> dict:
    try:
        res = bootstrap_ci(data, metric, replicates, seed)
    except UndefinedMetric as exc:
        return {"point": None, "lower": None, "upper": None, "note": str(exc)}
    return {"point": res.point, "lower": res.lower, "upper": res.upper, "undefined_replicates": res.undefined}


def _sens(ref, pred):
    return sens_spec(ref, pred)[0]


def _spec(ref, pred):
    return sens_spec(ref, pred)[1]


def evaluate_cases(cases: Sequence[EvalCase], replicates: int = 1000, seed: int = 0) -> dict:
    """Per-cohort metrics with bootstrap CIs, confusion matrices and significant errors."""
    report = {}
    for cohort in sorted({c.cohort for c in cases}):
        cs = [c for c in cases if c.cohort == cohort]
        ref = np.array([c.ref_isup for c in cs])
        pred = np.array([c.pred_isup for c in cs])
        mal = np.array([c.malignancy for c in cs])
        entry: dict = {"n": len(cs), "n_by_level": {}}
        for c in cs:
            entry["n_by_level"][c.level] = entry["n_by_level"].get(c.level, 0) + 1
        entry["isup_qwk"] = _ci([ref, pred], lambda a, b: cohen_kappa(a, b, ISUP_CATEGORIES, "quadratic"), replicates, seed)
        entry["isup_lwk"] = _ci([ref, pred], lambda a, b: cohen_kappa(a, b, ISUP_CATEGORIES, "linear"), replicates, seed)
        entry["isup_confusion"] = confusion_matrix(ref, pred, ISUP_CATEGORIES).tolist()
        with_gs = [c for c in cs if c.ref_gs is not None]
        if with_gs:
            gr = np.array([c.ref_gs for c in with_gs])
            gp = np.array([c.pred_gs for c in with_gs])
            entry["gs_qwk"] = _ci([gr, gp], lambda a, b: cohen_kappa(a, b, GS_CATEGORIES, "quadratic"), replicates, seed)
            entry["gs_lwk"] = _ci([gr, gp], lambda a, b: cohen_kappa(a, b, GS_CATEGORIES, "linear"), replicates, seed)
            entry["gs_confusion"] = confusion_matrix(gr, gp, GS_CATEGORIES).tolist()
        rb, pb = ref >= 1, pred >= 1
        entry["sensitivity"] = _ci([rb, pb], _sens, replicates, seed)
        entry["specificity"] = _ci([rb, pb], _spec, replicates, seed)
        entry["auroc"] = _ci([mal, rb], auroc, replicates, seed)
        slide_cases = [c for c in cs if c.level == "slide"]
        audit = significant_error_audit(
            {c.unit_key: c.ref_isup for c in slide_cases}, {"model": {c.unit_key: c.pred_isup for c in slide_cases}}
        )
        entry["significant_errors"] = {
            "count": len(audit.tables["model"]),
            "evaluated": audit.evaluated["model"],
            "rate": audit.rate("model"),
            "slides": [r.slide_id for r in audit.tables["model"]],
        }
        report[cohort] = entry
    return report
