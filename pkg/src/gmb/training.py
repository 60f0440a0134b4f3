"""Two-head cross-entropy training with scanner/ISUP-uniform epochs, early stopping and CV."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .bags import BagStore
from .grading import GleasonScore, gs_to_isup
from .manifest import CohortManifest, ReferenceLabel, parse_label
from .model import EncoderSpec, GatedAbmil, SlideForward, init_params, predict_patterns
from .stats import ISUP_CATEGORIES, UndefinedMetric, qwk

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    accumulation_interval: int = 4
    effective_batch_wsis: int = 32
    max_patches_per_wsi: int = 1800
    patience_epochs: int = 200
    max_epochs: int | None = None
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "max_epochs", "weight_decay", "patience_epochs"):
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v!r}")
        if self.weight_decay < 0 or self.patience_epochs < 0:
            raise ValueError("weight_decay and patience_epochs must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- loss and gradients ----------------------------------------------------------


def compute_loss(fwd: SlideForward, label: GleasonScore, accumulation_interval: int = 1) -> torch.Tensor:
    """Summed cross-entropy of both heads against the ordinal pattern codes, over the interval."""
    target_p = torch.tensor([label.primary.code])
    target_s = torch.tensor([label.secondary.code])
    loss = F.cross_entropy(fwd.logits_primary[None], target_p) + F.cross_entropy(fwd.logits_secondary[None], target_s)
    return loss / accumulation_interval


def backward(
    model: GatedAbmil,
    bag,
    label: GleasonScore,
    accumulation_interval: int = 1,
    dropout_active: bool = False,
    rng_seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Exact gradient of :func:`compute_loss` with respect to every trainable tensor."""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    loss = compute_loss(model.forward_slide(bag, dropout_active, rng_seed), label, accumulation_interval)
    grads = torch.autograd.grad(loss, params)
    return dict(zip(names, grads))


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def _decays(name: str) -> bool:
    return not name.endswith("bias")


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamWState, cfg: TrainConfig) -> AdamWState:
    """One AdamW update in place: bias-corrected moments plus decoupled weight decay.

    Bias tensors are exempt from decay. ``params`` maps names to tensors
    (e.g. ``dict(model.named_parameters())``).
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            if _decays(name) and cfg.weight_decay:
                p.mul_(1 - cfg.lr * cfg.weight_decay)
            p.sub_(cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps))
    return state


# -- sampling ----------------------------------------------------------------------


def slide_labels(m: CohortManifest) -> dict[str, ReferenceLabel]:
    """Reference labels of slide-level labeled slides."""
    out = {}
    for r in m.rows:
        label = parse_label(r)
        if label is not None and label.level == "slide":
            out[r.slide_id] = label
    return out


def epoch_sample(m: CohortManifest, seed: int) -> list[tuple[str, str]]:
    """One epoch of (slide_id, wsi_id) pairs with uniform ISUP grades per scanner.

    One WSI is first picked uniformly per slide (scanner augmentation). The
    picks are grouped by scanner; within a scanner every grade class keeps
    all its slides and is topped up by draws with replacement to the size of
    that scanner's largest class. Order is shuffled.
    """
    rng = np.random.default_rng(seed)
    labels = slide_labels(m)
    by_slide = defaultdict(list)
    for r in m.rows:
        if r.slide_id in labels:
            by_slide[r.slide_id].append(r)
    pools: dict[str, dict[int, list[tuple[str, str]]]] = defaultdict(lambda: defaultdict(list))
    for slide_id in sorted(by_slide):
        rows = sorted(by_slide[slide_id], key=lambda r: r.wsi_id)
        pick = rows[int(rng.integers(len(rows)))]
        pools[pick.scanner_serial][labels[slide_id].isup.grade].append((slide_id, pick.wsi_id))
    out: list[tuple[str, str]] = []
    for serial in sorted(pools):
        classes = pools[serial]
        target = max(len(v) for v in classes.values())
        for grade in sorted(classes):
            members = classes[grade]
            out.extend(members)
            extra = target - len(members)
            if extra:
                out.extend(members[i] for i in rng.integers(0, len(members), size=extra))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def subsample_patients(m: CohortManifest, fraction: float, seed: int) -> CohortManifest:
    """Keep a random fraction of development patients; nested across fractions for a fixed seed."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    dev = sorted({r.patient_id for r in m.rows if r.split == "development"})
    order = np.random.default_rng(seed).permutation(len(dev))
    keep = {dev[i] for i in order[: max(1, math.ceil(fraction * len(dev)))]}
    return m.select(lambda r: r.split != "development" or r.patient_id in keep)


# -- fold training -------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: GatedAbmil
    meta: dict


@dataclass
class EnsembleCheckpoint:
    checkpoints: list[Checkpoint]

    @property
    def metadata(self) -> list[dict]:
        return [c.meta for c in self.checkpoints]

    def __len__(self) -> int:
        return len(self.checkpoints)


def _slide_units(m: CohortManifest) -> list[tuple[str, list[str], int]]:
    """(slide_id, wsi_ids, reference ISUP) for slide-labeled slides."""
    labels = slide_labels(m)
    wsis = defaultdict(list)
    for r in m.rows:
        if r.slide_id in labels:
            wsis[r.slide_id].append(r.wsi_id)
    return [(s, sorted(wsis[s]), labels[s].isup.grade) for s in sorted(wsis)]


def holdout_qwk(model: GatedAbmil, units, store: BagStore) -> float:
    """ISUP QWK of single-pass predictions (no TTA); NaN when undefined."""
    refs, preds = [], []
    with torch.no_grad():
        for _, wsi_ids, ref in units:
            score = predict_patterns(model.forward_slide(store.unit_bag(wsi_ids)))
            refs.append(ref)
            preds.append(gs_to_isup(score).grade)
    try:
        return qwk(refs, preds, ISUP_CATEGORIES)
    except UndefinedMetric:
        return float("nan")


def train_on(
    train_m: CohortManifest,
    holdout_m: CohortManifest,
    cfg: TrainConfig,
    spec: EncoderSpec,
    store: BagStore,
    fold: int = 0,
    history: list | None = None,
) -> Checkpoint:
    """Train until ``patience_epochs`` epochs pass without a better holdout QWK."""
    model = init_params(spec, _derive_seed(cfg.seed, fold, 0))
    params = dict(model.named_parameters())
    state = AdamWState()
    labels = slide_labels(train_m)
    units = _slide_units(holdout_m)
    if not labels:
        raise TrainingError("no slide-level labels in the training split")
    missing_gs = [s for s, lab in labels.items() if lab.score is None]
    if missing_gs:
        raise TrainingError(f"{len(missing_gs)} training slides lack a Gleason score; pattern heads need GS labels")
    if not units:
        raise TrainingError("no slide-level labels in the holdout split")

    best_qwk, best_epoch, best_state = -math.inf, 0, None
    since_best = 0
    epoch = 0
    while True:
        epoch += 1
        ep_seed = _derive_seed(cfg.seed, fold, epoch)
        rng = np.random.default_rng(ep_seed)
        samples = epoch_sample(train_m, ep_seed)
        for p in params.values():
            p.grad = None
        pending, losses = 0, []
        for i, (slide_id, wsi_id) in enumerate(samples):
            n = store.count(wsi_id)
            if n == 0:
                continue
            index = np.sort(rng.choice(n, size=min(n, cfg.max_patches_per_wsi), replace=False))
            ops = rng.integers(0, 8, size=len(index))
            bag = store.bag(wsi_id, ops, index)
            fwd = model.forward_slide(bag, dropout_active=True, rng_seed=_derive_seed(ep_seed, i))
            loss = compute_loss(fwd, labels[slide_id].score, cfg.accumulation_interval)
            loss.backward()
            losses.append(loss.item() * cfg.accumulation_interval)
            pending += 1
            if pending == cfg.effective_batch_wsis:
                _apply(params, state, cfg, pending)
                pending = 0
        if pending:
            _apply(params, state, cfg, pending)

        score = holdout_qwk(model, units, store)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if history is not None:
            history.append({"epoch": epoch, "fold": fold, "train_loss": train_loss, "holdout_qwk": score})
        log.info("fold %d epoch %d loss %.4f holdout QWK %.4f", fold, epoch, train_loss, score)
        if best_state is None or score > best_qwk:
            best_qwk = score if not math.isnan(score) else best_qwk
            best_epoch, best_state, since_best = epoch, copy.deepcopy(model.state_dict()), 0
        else:
            since_best += 1
        if since_best >= cfg.patience_epochs or (cfg.max_epochs is not None and epoch >= cfg.max_epochs):
            break

    model.load_state_dict(best_state)
    meta = {
        "fold": fold,
        "best_epoch": best_epoch,
        "best_qwk": None if math.isinf(best_qwk) else best_qwk,
        "epochs_run": epoch,
        "seed": cfg.seed,
    }
    return Checkpoint(model, meta)


def _apply(params, state: AdamWState, cfg: TrainConfig, pending: int) -> None:
    # grads hold sum_i dL_i / interval; rescale to the mean per-WSI gradient
    scale = cfg.accumulation_interval / pending
    grads = {n: p.grad * scale for n, p in params.items() if p.grad is not None}
    optimizer_step(params, grads, state, cfg)
    for p in params.values():
        p.grad = None


def train_fold(m: CohortManifest, fold: int, cfg: TrainConfig, spec: EncoderSpec, store: BagStore, history: list | None = None) -> Checkpoint:
    dev = m.select(lambda r: r.split == "development")
    folds = {r.fold for r in dev.rows}
    if None in folds:
        raise TrainingError("development rows without CV fold; run make_cv_folds first")
    if fold not in folds:
        raise TrainingError(f"fold {fold} not present (folds: {sorted(folds)})")
    train_m = dev.select(lambda r: r.fold != fold)
    holdout_m = dev.select(lambda r: r.fold == fold)
    return train_on(train_m, holdout_m, cfg, spec, store, fold, history)


def train_cv(m: CohortManifest, cfg: TrainConfig, spec: EncoderSpec, store: BagStore, history: list | None = None) -> EnsembleCheckpoint:
    """One model per CV fold, each keeping its best holdout epoch."""
    folds = sorted({r.fold for r in m.rows if r.split == "development" and r.fold is not None})
    out = []
    for fold in folds:
        try:
            out.append(train_fold(m, fold, cfg, spec, store, history))
        except Exception as exc:
            raise TrainingError(f"fold {fold} failed: {exc}") from exc
    return EnsembleCheckpoint(out)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "fold", "train_loss", "holdout_qwk"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(history)
