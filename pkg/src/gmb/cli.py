"""``gmb`` command-line entry point.

Usage: ``gmb <synth|validate|tile|train|predict|evaluate|audit|energy> --config run.json [flags]``.
Relative paths in the config resolve against the config file's directory.
Exit codes: 0 success, 1 manifest violations, 2 runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bags import BagStore, embedding_path, patch_path
from .energy import energy_report, integrate_energy, read_power_log, scale_to_ensemble, write_report
from .grading import encode_gs_ordinal
from .inference import PredictionUnit, group_units, heatmap, predict_unit, read_predictions, write_heatmap, write_predictions
from .manifest import (
    CohortManifest,
    apply_exclusions,
    make_cv_folds,
    parse_label,
    read_manifest,
    validate_manifest,
    write_exclusion_log,
    write_manifest,
)
from .model import EncoderSpec, load_checkpoint, save_checkpoint
from .records import EmbeddingFile, patch_key, write_embeddings, write_patch_records
from .stats import EvalCase, cross_scanner, evaluate_cases, significant_error_audit
from .synth import SynthConfig, generate_cohort, oracle_embed_all_ops
from .tiling import ThresholdParams, extract_patch_grid, load_pyramid, tissue_mask_for
from .training import TrainConfig, subsample_patients, train_cv, write_history

log = logging.getLogger("gmb")

COMMANDS = ("synth", "validate", "tile", "train", "predict", "evaluate", "audit", "energy")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    manifest: Path
    patch_dir: Path
    checkpoint_dir: Path
    report_dir: Path


@dataclass
class TilingConfig:
    edge_px: int = 256
    overlap_px: int = 128
    target_um_per_px: float = 1.0
    min_tissue_fraction: float = 0.10
    s_min: float = 0.05
    l_max: float = 0.95
    oracle_noise: float = 0.05


@dataclass
class InferenceConfig:
    tta_runs: int = 3
    ensemble: str = ""
    splits: list[str] = field(default_factory=lambda: ["internal_validation", "external_validation"])
    one_wsi_per_slide: bool = True
    bootstrap_replicates: int = 1000


@dataclass
class RunConfig:
    paths: Paths
    seed: int = 0
    cv_folds: int = 10
    synth: SynthConfig = field(default_factory=SynthConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    energy: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed_override: str | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent
        known = {"paths", "seed", "cv_folds", "synth", "tiling", "encoder", "train", "inference", "energy"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        p = raw.get("paths", {})
        need = ("manifest", "patch_dir", "checkpoint_dir", "report_dir")
        missing = [k for k in need if k not in p]
        if missing:
            raise ConfigError(f"config paths missing: {missing}")
        paths = Paths(*(base / p[k] for k in need))
        seed = int(raw.get("seed", 0))
        if seed_override not in (None, ""):
            seed = int(seed_override)
        try:
            train = TrainConfig.from_dict({**raw.get("train", {}), "seed": seed})
            cfg = cls(
                paths=paths,
                seed=seed,
                cv_folds=int(raw.get("cv_folds", 10)),
                synth=SynthConfig.from_dict({**raw.get("synth", {}), "seed": seed}),
                tiling=TilingConfig(**raw.get("tiling", {})),
                encoder=EncoderSpec(**raw.get("encoder", {})),
                train=train,
                inference=InferenceConfig(**raw.get("inference", {})),
                energy=raw.get("energy", {}),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if cfg.inference.ensemble:
            cfg.inference.ensemble = str(base / cfg.inference.ensemble)
        return cfg

    def ensemble_path(self) -> Path:
        return Path(self.inference.ensemble) if self.inference.ensemble else self.paths.checkpoint_dir / "ensemble.json"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- subcommands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    m = generate_cohort(cfg.synth, cfg.paths.manifest.parent, manifest_name=cfg.paths.manifest.name)
    print(f"wrote {len(m)} WSIs to {cfg.paths.manifest}")
    return 0


def cmd_validate(cfg: RunConfig, args) -> int:
    m = read_manifest(_require(cfg.paths.manifest, "manifest"))
    violations = validate_manifest(m)
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    (cfg.paths.report_dir / "violations.txt").write_text("".join(f"{v}\n" for v in violations))
    if args.apply_exclusions:
        kept, excl = apply_exclusions(m)
        write_manifest(kept, cfg.paths.report_dir / "manifest_clean.csv")
        write_exclusion_log(excl, cfg.paths.report_dir / "exclusions.jsonl")
    for v in violations:
        print(v, file=sys.stderr)
    print(f"{len(violations)} violations in {len(m)} rows")
    return 1 if violations else 0


def tile_wsi(sidecar: Path, wsi_id: str, patch_dir: Path, tiling: TilingConfig, encoder: EncoderSpec) -> int:
    """Tile one WSI into its record file (plus oracle embeddings in frozen mode); returns the patch count."""
    pyramid = load_pyramid(sidecar)
    mask = tissue_mask_for(pyramid, ThresholdParams(tiling.s_min, tiling.l_max))
    rec = extract_patch_grid(
        pyramid, mask, tiling.edge_px, tiling.target_um_per_px, tiling.overlap_px, tiling.min_tissue_fraction
    )
    write_patch_records(patch_path(patch_dir, wsi_id), rec)
    if encoder.mode == "frozen_file":
        emb = oracle_embed_all_ops(rec.patches, encoder.embed_dim, tiling.oracle_noise)
        keys = [patch_key(int(x), int(y), op) for op in range(8) for x, y in rec.origins]
        write_embeddings(embedding_path(patch_dir, wsi_id), EmbeddingFile(keys, emb.reshape(-1, encoder.embed_dim)))
    return len(rec)


def cmd_tile(cfg: RunConfig, args) -> int:
    m = read_manifest(_require(cfg.paths.manifest, "manifest"))
    cfg.paths.patch_dir.mkdir(parents=True, exist_ok=True)
    total = 0
    for r in m.rows:
        total += tile_wsi(m.resolve(r.filename), r.wsi_id, cfg.paths.patch_dir, cfg.tiling, cfg.encoder)
    print(f"tiled {len(m)} WSIs into {total} patches")
    return 0


def prepare_training_manifest(m: CohortManifest, k: int, seed: int, fraction: float = 1.0) -> CohortManifest:
    if any(r.split == "development" and r.fold is None for r in m.rows):
        m = make_cv_folds(m, k, seed)
    if fraction < 1.0:
        m = subsample_patients(m, fraction, seed)
    return m


def cmd_train(cfg: RunConfig, args) -> int:
    m = read_manifest(_require(cfg.paths.manifest, "manifest"))
    _require(cfg.paths.patch_dir, "patch directory")
    m = prepare_training_manifest(m, cfg.cv_folds, cfg.seed, args.train_fraction)
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    cfg.paths.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(m, cfg.paths.report_dir / "manifest_train.csv")
    store = BagStore(cfg.paths.patch_dir, cfg.encoder.mode)
    history: list[dict] = []
    ensemble = train_cv(m, cfg.train, cfg.encoder, store, history)
    write_history(history, cfg.paths.report_dir / "history.csv")
    files = []
    for ck in ensemble.checkpoints:
        name = f"fold{ck.meta['fold']}.gck"
        save_checkpoint(cfg.paths.checkpoint_dir / name, ck.model, ck.meta)
        files.append(name)
    index = {"checkpoints": files, "metadata": ensemble.metadata, "train_fraction": args.train_fraction}
    cfg.ensemble_path().write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(files)} models")
    return 0


def load_ensemble(path: Path):
    index = json.loads(_require(path, "ensemble index").read_text())
    return [load_checkpoint(path.parent / f)[0] for f in index["checkpoints"]]


def _eval_manifest(cfg: RunConfig) -> CohortManifest:
    m = read_manifest(_require(cfg.paths.manifest, "manifest"))
    return m.select(lambda r: r.split in cfg.inference.splits)


def cmd_predict(cfg: RunConfig, args) -> int:
    models = load_ensemble(cfg.ensemble_path())
    for mdl in models:
        if mdl.spec != cfg.encoder:
            raise ValueError(f"checkpoint encoder {mdl.spec} does not match config encoder {cfg.encoder}")
    m = _eval_manifest(cfg)
    if not len(m):
        raise ValueError(f"no WSIs in splits {cfg.inference.splits}")
    store = BagStore(_require(cfg.paths.patch_dir, "patch directory"), cfg.encoder.mode)
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    units = group_units(m, cfg.inference.one_wsi_per_slide, cfg.seed)
    records = [predict_unit(models, u, store, cfg.inference.tta_runs, cfg.seed) for u in units]
    write_predictions(units, records, cfg.paths.report_dir / "predictions.csv")
    if args.per_wsi:
        by_wsi = group_units_per_wsi(m)
        recs = [predict_unit(models, u, store, cfg.inference.tta_runs, cfg.seed) for u in by_wsi]
        write_predictions(by_wsi, recs, cfg.paths.report_dir / "predictions_wsi.csv")
    for wsi_id in args.heatmap or ():
        write_heatmap(heatmap(models[0], store, wsi_id), cfg.paths.report_dir / f"heatmap_{wsi_id}.csv")
    print(f"predicted {len(units)} units with {len(models)} models x {cfg.inference.tta_runs} TTA runs")
    return 0


def group_units_per_wsi(m: CohortManifest):
    return [PredictionUnit(r.wsi_id, (r.wsi_id,), "wsi", r.cohort, parse_label(r)) for r in sorted(m.rows, key=lambda r: r.wsi_id)]


def build_cases(m: CohortManifest, preds: dict, one_wsi_per_slide: bool, seed: int) -> list[EvalCase]:
    cases = []
    for u in group_units(m, one_wsi_per_slide, seed):
        if u.unit_key not in preds:
            raise ValueError(f"no prediction for unit {u.unit_key}")
        p = preds[u.unit_key]
        ref = u.reference
        cases.append(
            EvalCase(
                cohort=u.cohort,
                level=u.level,
                unit_key=u.unit_key,
                ref_isup=ref.isup.grade,
                pred_isup=p["winner_isup"],
                pred_gs=p["winner_ordinal"],
                malignancy=p["malignancy"],
                ref_gs=encode_gs_ordinal(ref.score) if ref.score is not None else None,
            )
        )
    return cases


def cross_scanner_from_wsi(m: CohortManifest, wsi_preds: dict) -> dict:
    """Pairwise scanner QWK on slides digitized by every scanner present."""
    by_scanner: dict[str, dict[str, int]] = defaultdict(dict)
    for r in m.rows:
        if r.wsi_id in wsi_preds:
            by_scanner[r.scanner_serial][r.slide_id] = wsi_preds[r.wsi_id]["winner_isup"]
    if len(by_scanner) < 2:
        return {}
    common = set.intersection(*(set(v) for v in by_scanner.values()))
    if not common:
        return {}
    res = cross_scanner({s: {k: v[k] for k in common} for s, v in by_scanner.items()})
    return {"slides": len(common), "mean_qwk": res.mean, "pairs": {f"{a}|{b}": q for (a, b), q in res.pairs.items()}}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def cmd_evaluate(cfg: RunConfig, args) -> int:
    m = _eval_manifest(cfg)
    preds = read_predictions(_require(cfg.paths.report_dir / "predictions.csv", "predictions"))
    cases = build_cases(m, preds, cfg.inference.one_wsi_per_slide, cfg.seed)
    report = evaluate_cases(cases, cfg.inference.bootstrap_replicates, cfg.seed)
    wsi_file = cfg.paths.report_dir / "predictions_wsi.csv"
    if wsi_file.exists():
        xs = cross_scanner_from_wsi(m, read_predictions(wsi_file))
        if xs:
            report["cross_scanner"] = xs
    (cfg.paths.report_dir / "eval_report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    with open(cfg.paths.report_dir / "eval_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cohort", "metric", "point", "lower", "upper"])
        for cohort, entry in sorted(report.items()):
            if cohort == "cross_scanner":
                continue
            for metric in ("isup_qwk", "isup_lwk", "gs_qwk", "gs_lwk", "sensitivity", "specificity", "auroc"):
                if metric in entry:
                    e = entry[metric]
                    w.writerow([cohort, metric, e["point"], e["lower"], e["upper"]])
    for cohort, entry in sorted(report.items()):
        if cohort != "cross_scanner":
            print(f"{cohort}: n={entry['n']} ISUP QWK={entry['isup_qwk']['point']:.4f} significant errors={entry['significant_errors']['count']}")
    return 0


def cmd_audit(cfg: RunConfig, args) -> int:
    m = _eval_manifest(cfg)
    preds = read_predictions(_require(cfg.paths.report_dir / "predictions.csv", "predictions"))
    reference = {u.unit_key: u.reference.isup.grade for u in group_units(m) if u.level == "slide"}
    audit = significant_error_audit(reference, {"model": {k: v["winner_isup"] for k, v in preds.items()}})
    with open(cfg.paths.report_dir / "audit.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "reference_isup", "predicted_isup", "rule"])
        for row in audit.tables["model"]:
            w.writerow([row.slide_id, row.reference_isup, row.predicted_isup, row.rule])
    n, k = audit.evaluated["model"], len(audit.tables["model"])
    print(f"{k} significant errors in {n} slides ({100 * audit.rate('model'):.2f}%)")
    return 0


def cmd_energy(cfg: RunConfig, args) -> int:
    """Energy report from ``energy.runs``: each run names a power log or a measured kWh total."""
    e = cfg.energy
    runs_cfg = e.get("runs")
    if not runs_cfg:
        raise ConfigError("energy.runs is empty")
    base = cfg.paths.manifest.parent
    runs = {}
    for name, spec in runs_cfg.items():
        if "power_log" in spec:
            plog = read_power_log(_require(base / spec["power_log"], f"power log for {name}"), name)
            kwh, hours = integrate_energy(plog), plog.duration_s / 3600.0
        else:
            kwh, hours = float(spec["kwh"]), float(spec.get("gpu_hours", 0.0))
        runs[name] = scale_to_ensemble(kwh, hours, int(spec.get("ensemble_size", 1)), int(spec.get("tta_runs", 1)))
    report = energy_report(runs, int(e["slide_count"]), e.get("baseline"))
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, cfg.paths.report_dir / "energy_report.json")
    for name, r in report["runs"].items():
        print(f"{name}: {r['total_kwh']:.4f} kWh, {r['wh_per_biopsy']:.4f} Wh per biopsy")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "validate": cmd_validate,
    "tile": cmd_tile,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "audit": cmd_audit,
    "energy": cmd_energy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmb", description="Gleason grading MIL pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--threads", type=int, default=1, help="cap on torch intra-op threads")
    parser.add_argument("--train-fraction", type=float, default=1.0, help="fraction of development patients to train on")
    parser.add_argument("--apply-exclusions", action="store_true", help="validate: also write the cleaned manifest")
    parser.add_argument("--per-wsi", action="store_true", help="predict: also predict every WSI separately")
    parser.add_argument("--heatmap", action="append", metavar="WSI_ID", help="predict: write a patch heatmap")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if not 0 < args.train_fraction <= 1:
            raise ConfigError("--train-fraction must be in (0, 1]")
        torch.set_num_threads(args.threads)
        cfg = RunConfig.load(args.config, os.environ.get("GMB_SEED"))
        return HANDLERS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 2
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"gmb {args.command}: error: {msg}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
