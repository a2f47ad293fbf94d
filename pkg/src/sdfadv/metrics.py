"""Detection matching, threshold-recall curves, AUC and BEV score-reduction grids."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from sdfadv.detector import BevBox
from sdfadv.errors import EmptyOutcomes

MATCH_RADIUS = 5.0


@dataclass(frozen=True)
class TrialOutcome:
    gt: BevBox
    score: float
    matched: bool
    scene_id: str = ""

    def __post_init__(self):
        if not self.matched and self.score != 0.0:
            raise ValueError("unmatched outcomes must carry score 0")


@dataclass(frozen=True)
class Curve:
    thresholds: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        if len(self.thresholds) != len(self.recall):
            raise ValueError("thresholds and recall differ in length")
        if np.any(np.diff(self.thresholds) < 0):
            raise ValueError("thresholds must be sorted")
        if np.any(np.diff(self.recall) > 0):
            raise ValueError("recall must be non-increasing in threshold")


def best_match(centers: np.ndarray, scores: np.ndarray, gt_center, radius: float = MATCH_RADIUS):
    """Index of the highest-scoring center strictly within ``radius``; None if none."""
    if len(scores) == 0:
        return None
    d = np.hypot(centers[:, 0] - gt_center[0], centers[:, 1] - gt_center[1])
    ok = np.flatnonzero(d < radius)
    if ok.size == 0:
        return None
    return int(ok[np.argmax(scores[ok])])


def match_detection(detections, gt: BevBox, scene_id: str = "", radius: float = MATCH_RADIUS) -> TrialOutcome:
    if not detections:
        return TrialOutcome(gt, 0.0, False, scene_id)
    centers = np.array([[d.box.cx, d.box.cy] for d in detections])
    scores = np.array([d.score for d in detections])
    i = best_match(centers, scores, (gt.cx, gt.cy), radius)
    if i is None:
        return TrialOutcome(gt, 0.0, False, scene_id)
    return TrialOutcome(gt, float(scores[i]), True, scene_id)


def threshold_recall(outcomes, n_thresholds: int = 1001) -> Curve:
    """Fraction of trials whose matched score exceeds each threshold in [0, 1]."""
    scores = np.array([o.score for o in outcomes], dtype=float)
    if scores.size == 0:
        raise EmptyOutcomes("threshold_recall needs at least one outcome")
    t = np.linspace(0.0, 1.0, n_thresholds)
    ss = np.sort(scores)
    # number of scores strictly greater than t
    above = ss.size - np.searchsorted(ss, t, side="right")
    return Curve(thresholds=t, recall=above / ss.size)


def auc(curve: Curve) -> float:
    t, r = curve.thresholds, curve.recall
    return float(np.sum(0.5 * (r[1:] + r[:-1]) * np.diff(t)))


def score_reduction_grid(pairs, cell: float = 10.0) -> dict:
    """Mean (baseline - adversarial) score per ``cell`` x ``cell`` BEV cell.

    ``pairs`` holds (x, y, baseline_score, adversarial_score).  Returns
    {(ix, iy): (mean_reduction, count)}; cells without pairs are absent.
    """
    acc = defaultdict(list)
    for x, y, base, adv in pairs:
        acc[(math.floor(x / cell), math.floor(y / cell))].append(base - adv)
    return {k: (float(np.mean(v)), len(v)) for k, v in sorted(acc.items())}


def write_curve_csv(curve: Curve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "recall"])
        for t, r in zip(curve.thresholds, curve.recall):
            w.writerow([f"{t:.6f}", f"{r:.6f}"])


def write_grid_csv(grid: dict, path, cell: float = 10.0) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "mean_reduction", "count"])
        for (ix, iy), (m, n) in sorted(grid.items()):
            w.writerow([f"{ix * cell:g}", f"{iy * cell:g}", f"{m:.6f}", n])
