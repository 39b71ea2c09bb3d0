"""Per-class average precision at a fixed IoU (all-point interpolation)."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .detector import box_iou_np


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope, integrated at every recall step."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _arrays(labels):
    if hasattr(labels, "as_arrays"):
        xyxy, cls = labels.as_arrays()
        return xyxy, cls, labels.scores()
    xyxy, cls = labels[0], labels[1]
    scores = labels[2] if len(labels) > 2 else np.ones(len(cls))
    return np.asarray(xyxy, dtype=np.float64).reshape(-1, 4), np.asarray(cls), np.asarray(scores, dtype=np.float64)


def evaluate_detections(
    predictions: Sequence, ground_truth: Sequence, num_classes: int, iou_thresh: float = 0.5
) -> Dict[str, object]:
    """AP per class and mAP over classes that have ground truth.

    ``predictions[n]`` and ``ground_truth[n]`` are LabelSets (or
    ``(xyxy, classes[, scores])`` tuples) of image ``n``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different images")
    preds = [_arrays(p) for p in predictions]
    gts = [_arrays(g) for g in ground_truth]
    ap: Dict[int, float] = {}
    n_gt_per_class: Dict[int, int] = {}
    for c in range(num_classes):
        gt_boxes = [g[0][g[1] == c] for g in gts]
        n_gt = int(sum(len(b) for b in gt_boxes))
        n_gt_per_class[c] = n_gt
        if n_gt == 0:
            continue
        dets: List[tuple] = []
        for img, (xyxy, cls, scores) in enumerate(preds):
            for k in np.nonzero(cls == c)[0]:
                dets.append((-float(scores[k]), img, xyxy[k]))
        if not dets:
            ap[c] = 0.0
            continue
        dets.sort(key=lambda d: (d[0], d[1]))
        used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(dets))
        for i, (_, img, box) in enumerate(dets):
            cand = gt_boxes[img]
            if len(cand) == 0:
                continue
            iou = box_iou_np(box[None], cand)[0]
            best = int(iou.argmax())
            if iou[best] >= iou_thresh and not used[img][best]:
                used[img][best] = True
                tp[i] = 1.0
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1)
        ap[c] = average_precision(recall, precision)
    m_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return {"ap": ap, "map": m_ap, "num_gt": n_gt_per_class, "iou": iou_thresh}


def precision_at(predictions: Sequence, ground_truth: Sequence, score_thresh: float, iou_thresh: float = 0.5) -> float:
    """Fraction of predictions above ``score_thresh`` matching an unused same-class box."""
    hits, total = 0, 0
    for p, g in zip(predictions, ground_truth):
        xyxy, cls, scores = _arrays(p)
        gxy, gcls, _ = _arrays(g)
        order = np.argsort(-scores, kind="stable")
        used = np.zeros(len(gxy), dtype=bool)
        for k in order:
            if scores[k] < score_thresh:
                continue
            total += 1
            same = np.nonzero((gcls == cls[k]) & ~used)[0]
            if len(same) == 0:
                continue
            iou = box_iou_np(xyxy[k][None], gxy[same])[0]
            j = int(iou.argmax())
            if iou[j] >= iou_thresh:
                used[same[j]] = True
                hits += 1
    return hits / total if total else 1.0
