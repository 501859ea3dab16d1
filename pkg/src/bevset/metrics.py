"""Detection scoring: center-distance AP averaged over thresholds, true-positive
error metrics (translation, scale, orientation, velocity), and the composite
detection score.

Conventions: AP uses 101-point interpolation with the recall/precision region
below 0.1 clipped and the area renormalized by 0.81; TP errors come from the
2 m threshold matches; the composite score weighs mAP by 5 and each
complemented error by 1 over a denominator of 9 (no attribute error here).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Detection, LabeledBox

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
ERROR_NAMES = ("mATE", "mASE", "mAOE", "mAVE")


@dataclass
class MetricsReport:
    class_ap: dict[int, dict[float, float]]  # class -> threshold -> AP
    map_score: float
    errors: dict[str, float]
    nds_score: float
    n_targets: int
    n_predictions: int

    def flat(self) -> dict[str, float]:
        out = {"mAP": self.map_score, "NDS": self.nds_score}
        out.update(self.errors)
        for c in sorted(self.class_ap):
            for t, ap in sorted(self.class_ap[c].items()):
                out[f"AP_class{c}_d{t:g}"] = ap
        return out


def match_by_center(preds: list[Detection], targets: list[LabeledBox],
                    dist_threshold: float) -> tuple[list[bool], list[tuple[Detection, LabeledBox]]]:
    """Greedy single-class matching of score-sorted predictions to targets.

    Each prediction takes the nearest unmatched same-class target strictly
    within the BEV distance threshold, else it is a false positive.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(targets)
    tp_labels = [False] * len(preds)
    pairs = []
    for i in order:
        p = preds[i]
        best_j, best_d = -1, dist_threshold
        for j, t in enumerate(targets):
            if taken[j] or t.class_id != p.class_id:
                continue
            d = math.hypot(p.center[0] - t.center[0], p.center[1] - t.center[1])
            if d < best_d:
                best_d, best_j = d, j
        if best_j >= 0:
            taken[best_j] = True
            tp_labels[i] = True
            pairs.append((p, targets[best_j]))
    return tp_labels, pairs


def average_precision(labels: list[bool], scores: list[float], n_targets: int) -> float:
    """101-point interpolated AP with the nuScenes-style clipped region."""
    if n_targets == 0 or not labels:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1 if labels[i] else 0 for i in order])
    fp = np.cumsum([0 if labels[i] else 1 for i in order])
    recall = tp / n_targets
    precision = tp / (tp + fp)
    grid = np.linspace(0.0, 1.0, 101)
    interp = np.zeros(101)
    for gi, r in enumerate(grid):
        mask = recall >= r - 1e-12
        interp[gi] = precision[mask].max() if mask.any() else 0.0
    region = grid > MIN_RECALL + 1e-12
    clipped = np.maximum(interp[region] - MIN_PRECISION, 0.0)
    return float(clipped.sum() * 0.01 / ((1 - MIN_RECALL) * (1 - MIN_PRECISION)))


def yaw_error(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def scale_error(pred_size, target_size) -> float:
    ratio = 1.0
    for sp, st in zip(pred_size, target_size):
        ratio *= min(sp, st) / max(sp, st)
    return 1.0 - ratio


def tp_errors(pairs: list[tuple[Detection, LabeledBox]]) -> dict[str, float]:
    """Mean translation / scale / orientation / velocity errors; 1.0 when empty."""
    if not pairs:
        return {name: 1.0 for name in ERROR_NAMES}
    ate = np.mean([math.hypot(p.center[0] - t.center[0], p.center[1] - t.center[1])
                   for p, t in pairs])
    ase = np.mean([scale_error(p.size, t.size) for p, t in pairs])
    aoe = np.mean([yaw_error(p.yaw, t.yaw) for p, t in pairs])
    ave = np.mean([math.hypot(p.velocity[0] - t.velocity[0],
                              p.velocity[1] - t.velocity[1]) for p, t in pairs])
    return dict(zip(ERROR_NAMES, (float(ate), float(ase), float(aoe), float(ave))))


def nds(map_score: float, errors: dict[str, float]) -> float:
    total = 5.0 * map_score
    for name in ERROR_NAMES:
        total += 1.0 - min(1.0, errors[name])
    return total / 9.0


def score_scenes(per_scene: list[tuple[list[Detection], list[LabeledBox]]],
                 n_classes: int) -> MetricsReport:
    """Aggregate detections and ground truth over scenes into one report."""
    class_ap: dict[int, dict[float, float]] = {}
    tp_pairs: list[tuple[Detection, LabeledBox]] = []
    n_targets_all = sum(len(t) for _, t in per_scene)
    n_preds_all = sum(len(p) for p, _ in per_scene)
    for c in range(n_classes):
        class_ap[c] = {}
        for thr in DIST_THRESHOLDS:
            labels: list[bool] = []
            scores: list[float] = []
            n_targets = 0
            for preds, targets in per_scene:
                pc = [p for p in preds if p.class_id == c]
                tc = [t for t in targets if t.class_id == c]
                lab, pairs = match_by_center(pc, tc, thr)
                labels.extend(lab)
                scores.extend(p.score for p in pc)
                n_targets += len(tc)
                if thr == TP_THRESHOLD:
                    tp_pairs.extend(pairs)
            class_ap[c][thr] = average_precision(labels, scores, n_targets)
    aps = [ap for c in class_ap for ap in class_ap[c].values()]
    map_score = float(np.mean(aps)) if aps else 0.0
    errors = tp_errors(tp_pairs)
    return MetricsReport(class_ap, map_score, errors, nds(map_score, errors),
                         n_targets_all, n_preds_all)


def write_report_txt(report: MetricsReport, path, extra: dict[str, float] | None = None) -> None:
    lines = []
    flat = dict(report.flat())
    if extra:
        flat.update(extra)
    for key in flat:
        lines.append(f"{key}={flat[key]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"AP_d{t:g}" for t in DIST_THRESHOLDS])
        for c in sorted(report.class_ap):
            writer.writerow([c] + [f"{report.class_ap[c][t]:.6f}" for t in DIST_THRESHOLDS])
