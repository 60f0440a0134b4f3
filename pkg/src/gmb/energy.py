"""Power-log integration, per-biopsy energy and ensemble scaling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

JOULES_PER_KWH = 3.6e6


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class PowerLog:
    timestamps_s: np.ndarray
    watts: np.ndarray
    device_label: str = ""

    def __post_init__(self):
        t = np.asarray(self.timestamps_s, dtype=float)
        w = np.asarray(self.watts, dtype=float)
        if t.shape != w.shape or t.ndim != 1:
            raise EnergyError("timestamps and watts must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise EnergyError("power log timestamps must be strictly increasing")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise EnergyError("power samples must be finite and non-negative")
        object.__setattr__(self, "timestamps_s", t)
        object.__setattr__(self, "watts", w)

    @property
    def duration_s(self) -> float:
        return float(self.timestamps_s[-1] - self.timestamps_s[0]) if len(self.timestamps_s) else 0.0


def read_power_log(path, device_label: str | None = None) -> PowerLog:
    t, w = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"timestamp_s", "watts"} <= set(reader.fieldnames or ()):
            raise EnergyError(f"{path}: expected columns timestamp_s, watts")
        for row in reader:
            t.append(float(row["timestamp_s"]))
            w.append(float(row["watts"]))
    return PowerLog(np.array(t), np.array(w), device_label if device_label is not None else Path(path).stem)


def integrate_energy(log: PowerLog) -> float:
    """Trapezoidal energy of the log in kWh."""
    if len(log.timestamps_s) < 2:
        raise EnergyError("need at least two power samples")
    return float(np.trapezoid(log.watts, log.timestamps_s)) / JOULES_PER_KWH


def per_biopsy(total_kwh: float, slide_count: int) -> float:
    """Energy per slide in Wh."""
    if slide_count < 1:
        raise EnergyError("slide_count must be at least 1")
    return total_kwh * 1000.0 / slide_count


@dataclass(frozen=True)
class EnergyTotals:
    kwh: float
    gpu_hours: float


def scale_to_ensemble(kwh: float, gpu_hours: float, ensemble_size: int, tta_runs: int) -> EnergyTotals:
    """Single-model, single-pass cost multiplied out to every model and TTA run."""
    if ensemble_size < 1 or tta_runs < 1:
        raise EnergyError("ensemble_size and tta_runs must be positive")
    factor = ensemble_size * tta_runs
    return EnergyTotals(kwh * factor, gpu_hours * factor)


def energy_report(
    runs: dict[str, EnergyTotals], slide_count: int, baseline: str | None = None
) -> dict:
    """Totals, Wh per biopsy and ratios against ``baseline`` (default: the first run)."""
    if not runs:
        raise EnergyError("no runs to report")
    baseline = baseline or next(iter(runs))
    if baseline not in runs:
        raise EnergyError(f"unknown baseline {baseline!r}")
    base = runs[baseline].kwh
    report = {"baseline": baseline, "slide_count": slide_count, "runs": {}}
    for name, tot in runs.items():
        report["runs"][name] = {
            "total_kwh": tot.kwh,
            "gpu_hours": tot.gpu_hours,
            "wh_per_biopsy": per_biopsy(tot.kwh, slide_count),
            "ratio_vs_baseline": tot.kwh / base if base > 0 else None,
        }
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
