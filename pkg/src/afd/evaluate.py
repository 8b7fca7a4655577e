"""VOC-style matching and all-points average precision."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .boxes import pairwise_iou
from .errors import NoGroundTruth


@dataclass
class PrCurve:
    scores: np.ndarray  # descending
    tp: np.ndarray  # cumulative true positives
    fp: np.ndarray  # cumulative false positives
    num_gt: int

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.num_gt if self.num_gt else np.zeros_like(self.tp, dtype=np.float64)

    @property
    def precision(self) -> np.ndarray:
        denom = self.tp + self.fp
        return np.where(denom > 0, self.tp / np.maximum(denom, 1), 0.0)


def match_detections(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy one-to-one matching for one image and class.

    ``det_boxes`` must be sorted by descending score. Each detection takes the
    still-unmatched ground truth it overlaps most, provided IoU >= threshold.
    Returns a boolean TP flag per detection.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return flags
    ious = pairwise_iou(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(used, -1.0, ious[d])
        g = int(cand.argmax())
        if cand[g] >= iou_thresh:
            used[g] = True
            flags[d] = True
    return flags


def build_curve(scores, tp_flags, num_gt: int) -> PrCurve:
    scores = np.asarray(scores, dtype=np.float64)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order]).astype(np.float64)
    fp = np.cumsum(~tp_flags[order]).astype(np.float64)
    return PrCurve(scores[order], tp, fp, int(num_gt))


def average_precision(curve: PrCurve) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    if curve.num_gt <= 0:
        raise NoGroundTruth("average precision needs at least one ground truth")
    if len(curve.tp) == 0:
        return 0.0
    rec = np.concatenate([[0.0], curve.recall, [1.0]])
    prec = np.concatenate([[0.0], curve.precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def mean_ap(per_class_ap: dict) -> float:
    """Unweighted mean over classes that have ground truth (``None`` marks none)."""
    vals = [v for v in per_class_ap.values() if v is not None]
    if not vals:
        raise NoGroundTruth("no class has ground truth")
    return float(np.mean(vals))


def evaluate_detections(detections: list, gts: list, num_classes: int, iou_thresh: float = 0.5):
    """Per-class curves and APs over a dataset.

    ``detections[i]`` is a list of objects with ``box``, ``cls``, ``score``;
    ``gts[i]`` is ``(boxes, classes)``. Returns ``(per_class_ap, curves)``;
    classes without ground truth map to ``None``.
    """
    curves, aps = {}, {}
    for c in range(num_classes):
        scores, flags, num_gt = [], [], 0
        for dets, (gboxes, gclasses) in zip(detections, gts):
            gb = np.asarray(gboxes).reshape(-1, 4)[np.asarray(gclasses) == c]
            num_gt += len(gb)
            mine = sorted((d for d in dets if d.cls == c), key=lambda d: -d.score)
            if not mine:
                continue
            f = match_detections(np.stack([d.box for d in mine]), gb, iou_thresh)
            scores.extend(d.score for d in mine)
            flags.extend(f.tolist())
        curve = build_curve(scores, flags, num_gt)
        curves[c] = curve
        aps[c] = average_precision(curve) if num_gt > 0 else None
    return aps, curves


def write_pr_csv(path, curves: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "score", "precision", "recall"])
        for c, curve in curves.items():
            for s, p, r in zip(curve.scores, curve.precision, curve.recall):
                w.writerow([c, repr(float(s)), repr(float(p)), repr(float(r))])
