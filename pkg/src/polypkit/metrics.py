"""Evaluation kernels: ranking, precision-recall, calibration, detection.

Everything here is pure numpy over immutable inputs. Tie handling is exact
(no trapezoids, no interpolation grids) so results can be checked against
brute-force oracles to float precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "roc_auc", "binary_average_precision", "average_precision",
    "calibration_errors", "ReliabilityDiagram", "detection_prf",
    "DetectionPrf", "accuracy", "box_iou",
]


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Equals P(score+ > score-) + 0.5 P(score+ = score-), computed from
    average ranks so tie groups are handled exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("roc_auc: scores and labels must be equal-length 1-D")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: both classes must be present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    # Average 1-based ranks within each tie group.
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_average_precision(scores, labels) -> float:
    """All-point AP: sum of (R_k - R_{k-1}) * P_k over distinct thresholds.

    Ties share a threshold, so permuting tied entries cannot change the
    result.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("binary_average_precision: no positive samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def average_precision(scores, labels, n_classes: int = 5):
    """Per-class one-vs-rest AP plus the mean over classes with positives.

    ``scores`` is (n, n_classes); ``labels`` integer class ids. Classes with
    no positive sample are skipped with a warning and excluded from the
    mean. Raises if no class has a positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ValueError(
            f"average_precision: scores must be (n, {n_classes}), "
            f"got {scores.shape}")
    per_class = np.full(n_classes, np.nan)
    for k in range(n_classes):
        mask = labels == k
        if not mask.any():
            warnings.warn(f"average_precision: class {k} has no positives; skipped")
            continue
        per_class[k] = binary_average_precision(scores[:, k], mask)
    if np.isnan(per_class).all():
        raise ValueError("average_precision: no class has positive samples")
    mean_ap = float(np.nanmean(per_class))
    return per_class, mean_ap


@dataclass
class ReliabilityDiagram:
    """Equal-width confidence bins on [0,1]; the final bin is right-closed."""
    bin_edges: np.ndarray     # (B+1,)
    counts: np.ndarray        # (B,) ints
    mean_confidence: np.ndarray  # (B,), 0 where empty
    mean_accuracy: np.ndarray    # (B,), 0 where empty

    def rows(self):
        for b in range(self.counts.size):
            yield (float(self.bin_edges[b]), float(self.bin_edges[b + 1]),
                   int(self.counts[b]), float(self.mean_confidence[b]),
                   float(self.mean_accuracy[b]))


def calibration_errors(confidences, correct, n_bins: int = 10):
    """ECE, MCE, and the reliability diagram they are read from.

    ECE weights per-bin |accuracy - confidence| gaps by bin occupancy; MCE is
    the worst gap over nonempty bins.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct).astype(np.float64)
    if conf.shape != corr.shape or conf.ndim != 1:
        raise ValueError("calibration_errors: inputs must be equal-length 1-D")
    if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
        raise ValueError("calibration_errors: confidences must lie in [0, 1]")
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    nonempty = counts > 0
    mean_conf = np.zeros(n_bins)
    mean_acc = np.zeros(n_bins)
    mean_conf[nonempty] = conf_sum[nonempty] / counts[nonempty]
    mean_acc[nonempty] = acc_sum[nonempty] / counts[nonempty]
    gaps = np.abs(mean_acc - mean_conf)
    total = max(conf.size, 1)
    ece = float(np.sum(counts / total * gaps))
    mce = float(gaps[nonempty].max()) if nonempty.any() else 0.0
    diagram = ReliabilityDiagram(
        bin_edges=np.linspace(0.0, 1.0, n_bins + 1),
        counts=counts, mean_confidence=mean_conf, mean_accuracy=mean_acc)
    return ece, mce, diagram


def box_iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


@dataclass
class DetectionPrf:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    f2: float
    degenerate: bool  # set when a zero denominator forced a metric to 0


def _centroid_inside(pred_box, gt_box) -> bool:
    cx = 0.5 * (pred_box[0] + pred_box[2])
    cy = 0.5 * (pred_box[1] + pred_box[3])
    return gt_box[0] <= cx <= gt_box[2] and gt_box[1] <= cy <= gt_box[3]


def detection_prf(pred_boxes, pred_scores, gt_boxes, iou_tp: float = 0.5,
                  criterion: str = "iou") -> DetectionPrf:
    """Greedy matching in descending confidence; each gt matched at most once.

    A prediction is a true positive when it claims an unmatched ground truth
    under the chosen criterion: IoU >= iou_tp (default) or, with
    criterion="centroid", prediction centroid inside the gt box. Among
    admissible ground truths the highest-IoU one is taken (lowest index on
    ties). Zero-denominator metrics are reported as 0 with the degenerate
    flag set.
    """
    if criterion not in ("iou", "centroid"):
        raise ValueError(f"detection_prf: unknown criterion {criterion!r}")
    pred_boxes = [tuple(map(float, b)) for b in pred_boxes]
    gt_boxes = [tuple(map(float, b)) for b in gt_boxes]
    scores = np.asarray(pred_scores, dtype=np.float64)
    if len(pred_boxes) != scores.size:
        raise ValueError("detection_prf: one score per predicted box required")
    order = np.argsort(-scores, kind="mergesort")
    matched = [False] * len(gt_boxes)
    tp = 0
    for pi in order:
        pb = pred_boxes[pi]
        best_iou = -1.0
        best_gt = -1
        for gi, gb in enumerate(gt_boxes):
            if matched[gi]:
                continue
            overlap = box_iou(pb, gb)
            if criterion == "iou":
                admissible = overlap >= iou_tp
            else:
                admissible = _centroid_inside(pb, gb)
            if admissible and overlap > best_iou:
                best_iou = overlap
                best_gt = gi
        if best_gt >= 0:
            matched[best_gt] = True
            tp += 1
    fp = len(pred_boxes) - tp
    fn = len(gt_boxes) - tp
    degenerate = False

    def safe_div(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = safe_div(tp, tp + fp)
    recall = safe_div(tp, tp + fn)
    f1 = safe_div(2.0 * precision * recall, precision + recall)
    f2 = safe_div(5.0 * precision * recall, 4.0 * precision + recall)
    return DetectionPrf(tp, fp, fn, float(precision), float(recall),
                        float(f1), float(f2), degenerate)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("accuracy: preds and labels must be equal-length 1-D")
    if preds.size == 0:
        raise ValueError("accuracy: empty input")
    return float(np.mean(preds == labels))
