"""Threshold sweeps over aggregated influence and the detection operating point."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ifdetect.errors import ArgumentError, CapabilityError
from ifdetect.influence import InfluenceSummary

DEFAULT_GRID_POINTS = 201


@dataclass(frozen=True)
class ThresholdSweep:
    thresholds: np.ndarray
    flipped_detected_pct: np.ndarray
    nonflipped_detected_pct: np.ndarray
    n_flipped: int
    n_nonflipped: int
    no_flipped_samples: bool = False

    def to_rows(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(a), float(b))
            for t, a, b in zip(self.thresholds, self.flipped_detected_pct, self.nonflipped_detected_pct)
        ]


@dataclass
class DetectionReport:
    sweep: ThresholdSweep
    chosen_threshold: float
    detected_indices: list
    precision: float
    recall: float
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "chosen_threshold": self.chosen_threshold,
            "n_detected": len(self.detected_indices),
            "detected_indices": self.detected_indices,
            "precision": self.precision,
            "recall": self.recall,
            "n_flipped": self.sweep.n_flipped,
            "n_nonflipped": self.sweep.n_nonflipped,
            "config": self.config_echo,
        }


def default_grid(avg_score: np.ndarray, n_points: int = DEFAULT_GRID_POINTS, include_zero: bool = True) -> np.ndarray:
    """``n_points`` evenly spaced from min to max score, plus exactly 0."""
    lo, hi = float(np.min(avg_score)), float(np.max(avg_score))
    grid = np.linspace(lo, hi, n_points)
    if include_zero:
        grid = np.append(grid, 0.0)
    return np.unique(grid)


def _pct(hits: np.ndarray, total: int) -> np.ndarray:
    return 100.0 * hits / total if total else np.zeros_like(hits, dtype=np.float64)


def sweep(summary: InfluenceSummary, flip_mask: np.ndarray, thresholds: Sequence[float]) -> ThresholdSweep:
    """Percent of flipped / non-flipped samples with aggregate score strictly above each threshold."""
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ArgumentError("thresholds must be a non-empty list")
    if (np.diff(t) <= 0).any():
        raise ArgumentError("thresholds must be strictly ascending")
    scores = np.asarray(summary.avg_score, dtype=np.float64)
    mask = np.asarray(flip_mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ArgumentError("flip_mask length must match the number of training samples")

    def counts_above(values: np.ndarray) -> np.ndarray:
        # number of values strictly greater than each threshold
        return len(values) - np.searchsorted(np.sort(values), t, side="right")

    n_f, n_nf = int(mask.sum()), int((~mask).sum())
    return ThresholdSweep(
        thresholds=t,
        flipped_detected_pct=_pct(counts_above(scores[mask]), n_f),
        nonflipped_detected_pct=_pct(counts_above(scores[~mask]), n_nf),
        n_flipped=n_f,
        n_nonflipped=n_nf,
        no_flipped_samples=n_f == 0,
    )


def pick_threshold(sw: ThresholdSweep, max_nonflipped_pct: float) -> float:
    """Smallest swept threshold whose non-flipped detection rate fits the budget."""
    if not 0.0 <= max_nonflipped_pct <= 100.0:
        raise ArgumentError("max_nonflipped_pct must lie in [0, 100]")
    ok = np.flatnonzero(sw.nonflipped_detected_pct <= max_nonflipped_pct)
    if ok.size == 0:
        i = int(np.argmin(sw.nonflipped_detected_pct))
        raise CapabilityError(
            f"no swept threshold keeps non-flipped detections <= {max_nonflipped_pct}%; best is "
            f"{sw.nonflipped_detected_pct[i]:.3f}% at threshold {sw.thresholds[i]:.6g} "
            f"(flipped {sw.flipped_detected_pct[i]:.3f}%)"
        )
    return float(sw.thresholds[ok[0]])


def detection_report(
    summary: InfluenceSummary,
    flip_mask: np.ndarray,
    chosen_threshold: float,
    sw: ThresholdSweep | None = None,
    config_echo: dict | None = None,
) -> DetectionReport:
    scores = np.asarray(summary.avg_score)
    mask = np.asarray(flip_mask, dtype=bool)
    if sw is None:
        sw = sweep(summary, mask, default_grid(scores))
    detected = np.flatnonzero(scores > chosen_threshold)
    hits = int(mask[detected].sum())
    n_flipped = int(mask.sum())
    return DetectionReport(
        sweep=sw,
        chosen_threshold=float(chosen_threshold),
        detected_indices=[int(j) for j in detected],
        precision=hits / len(detected) if len(detected) else 0.0,
        recall=hits / n_flipped if n_flipped else 0.0,
        config_echo=dict(config_echo or {}),
    )


def write_sweep_csv(sw: ThresholdSweep, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "flipped_pct", "nonflipped_pct"])
        for t, a, b in sw.to_rows():
            w.writerow([repr(t), repr(a), repr(b)])
