"""Ground-truth matching, precision-recall curves, AUC and interpolated AP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detect import BoundingBox, pascal_overlap

TP, FP, IGNORED = 1, 0, -1
GTSDB, KITTI = "gtsdb", "kitti"
PROTOCOL_OVERLAP = {"sign": 0.6, "car": 0.7, "cyclist": 0.5}
AP_LEVELS = 11


@dataclass
class GroundTruth:
    box: BoundingBox
    ignore: bool = False  # "don't care": matches are neither TP nor FP


def uiuc_match(det: BoundingBox, gt: BoundingBox, tolerance: float = 0.25) -> bool:
    """Every edge within ``tolerance`` of the ground-truth dimension along its axis."""
    tx, ty = tolerance * gt.width, tolerance * gt.height
    return (abs(det.left - gt.left) <= tx and abs(det.right - gt.right) <= tx
            and abs(det.top - gt.top) <= ty and abs(det.bottom - gt.bottom) <= ty)


def match_detections(dets, gts, min_overlap: float = 0.5, protocol: str = KITTI, matcher: str = "overlap"):
    """Label detections (sorted by descending score) TP / FP / IGNORED.

    Each detection takes the unmatched ground truth of maximal overlap at or
    above ``min_overlap``. Detections whose best candidate was already taken
    are FP under the KITTI protocol and IGNORED under the GTSDB protocol.
    Detections matching only ``ignore`` ground truths are IGNORED.
    """
    gts = [g if isinstance(g, GroundTruth) else GroundTruth(g) for g in gts]
    taken = [False] * len(gts)
    labels = []
    for det in dets:
        box = det.box if hasattr(det, "box") else det
        best, best_ov, dup = -1, -1.0, False
        ignored_hit = False
        for j, g in enumerate(gts):
            if matcher == "uiuc":
                ok = uiuc_match(box, g.box)
                ov = pascal_overlap(box, g.box) if ok else -1.0
            else:
                ov = pascal_overlap(box, g.box)
                ok = ov >= min_overlap
            if not ok:
                continue
            if g.ignore:
                ignored_hit = True
                continue
            if taken[j]:
                dup = True
                continue
            if ov > best_ov:
                best, best_ov = j, ov
        if best >= 0:
            taken[best] = True
            labels.append(TP)
        elif ignored_hit:
            labels.append(IGNORED)
        elif dup:
            labels.append(IGNORED if protocol == GTSDB else FP)
        else:
            labels.append(FP)
    return labels


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    n_gt: int

    @property
    def max_recall(self) -> float:
        return float(self.recall[-1]) if len(self.recall) else 0.0


def pr_curve(scores, labels, n_gt: int) -> PRCurve:
    """One point per distinct score threshold, from the highest score down."""
    if n_gt < 1:
        raise ValueError("n_gt must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    keep = lab != IGNORED
    s, lab = s[keep], lab[keep]
    order = np.argsort(-s, kind="stable")
    s, lab = s[order], lab[order]
    tp = np.cumsum(lab == TP)
    fp = np.cumsum(lab == FP)
    # last index of each run of equal scores
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True)) if len(s) else np.zeros(0, int)
    tp, fp, th = tp[last], fp[last], s[last]
    return PRCurve(tp / n_gt, tp / np.maximum(tp + fp, 1), th, n_gt)


def auc(curve: PRCurve) -> float:
    """Trapezoidal area over recall in [0, max recall].

    The curve is extended to recall 0 at the precision of its first point.
    """
    if len(curve.recall) == 0:
        return 0.0
    r = np.concatenate([[0.0], curve.recall])
    p = np.concatenate([[curve.precision[0]], curve.precision])
    return float(np.clip(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2), 0.0, 1.0))


def interpolated_precision(curve: PRCurve, r: float) -> float:
    reached = curve.recall >= r - 1e-12
    return float(curve.precision[reached].max()) if reached.any() else 0.0


def average_precision(curve: PRCurve, levels: int = AP_LEVELS) -> float:
    """Mean interpolated precision at ``levels`` evenly spaced recalls in [0, 1]."""
    rs = np.linspace(0.0, 1.0, levels)
    return float(np.mean([interpolated_precision(curve, r) for r in rs]))


def evaluate_class(per_image_dets: dict, per_image_gts: dict, min_overlap: float, protocol: str = KITTI,
                   matcher: str = "overlap"):
    """Pool matches over images; returns (curve, scores, labels)."""
    scores, labels, n_gt = [], [], 0
    for image_id in sorted(set(per_image_dets) | set(per_image_gts)):
        gts = per_image_gts.get(image_id, [])
        n_gt += sum(1 for g in gts if not (isinstance(g, GroundTruth) and g.ignore))
        dets = sorted(per_image_dets.get(image_id, []), key=lambda d: -d.rank_score)
        lab = match_detections(dets, gts, min_overlap, protocol, matcher)
        scores += [d.rank_score for d in dets]
        labels += lab
    curve = pr_curve(scores, labels, max(n_gt, 1))
    if n_gt == 0:
        curve.n_gt = 0
    return curve, scores, labels
