"""Moment decoding, duplicate suppression, and the evaluation suite.

All interval math runs in frame units; seconds appear only at the reporting
boundary. Every metric here has a brute-force twin in the test suite and is
invariant under strictly monotone transforms of the confidences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class MomentPrediction:
    start: float
    end: float
    confidence: float

    def interval(self):
        return (self.start, self.end)

    def to_seconds(self, frame_rate: float) -> "MomentPrediction":
        return MomentPrediction(
            self.start / frame_rate, self.end / frame_rate, self.confidence
        )


def decode_moments(fg_probs, displacements, meta, num_frames: int):
    """Turn per-position head outputs into candidate moments.

    start = center - d_start*stride, end = center + d_end*stride, clamped to
    [0, T]; the foreground probability is the confidence. Sorted by
    confidence descending (ties: earlier start first).
    """
    fg = np.asarray(fg_probs, dtype=float)
    disp = np.asarray(displacements, dtype=float)
    preds = []
    for i in range(meta.total):
        c, s = meta.center[i], meta.stride[i]
        start = min(max(c - disp[i, 0] * s, 0.0), float(num_frames))
        end = min(max(c + disp[i, 1] * s, 0.0), float(num_frames))
        preds.append(MomentPrediction(start, end, float(fg[i])))
    preds.sort(key=lambda p: (-p.confidence, p.start))
    return preds


def temporal_iou(a, b) -> float:
    """Intersection over union of two intervals; 0 when the union is empty."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(preds, iou_threshold: float = 0.7):
    """Greedy suppression: keep the most confident, drop overlapping
    (IoU > threshold) survivors, repeat. Re-sorts defensively."""
    ordered = sorted(preds, key=lambda p: (-p.confidence, p.start))
    kept = []
    for p in ordered:
        if all(temporal_iou(p.interval(), k.interval()) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def recall_at_1(preds_per_query, gts_per_query, thresholds=(0.3, 0.5, 0.7)):
    """Fraction of queries whose top prediction reaches each IoU threshold
    against any ground-truth moment."""
    hits = {t: 0 for t in thresholds}
    n = len(gts_per_query)
    for preds, gts in zip(preds_per_query, gts_per_query):
        best = _top1_best_iou(preds, gts)
        for t in thresholds:
            if best >= t:
                hits[t] += 1
    return {t: hits[t] / n for t in thresholds}


def mean_iou(preds_per_query, gts_per_query) -> float:
    """Mean over queries of the top-1 prediction's best IoU."""
    vals = [
        _top1_best_iou(preds, gts)
        for preds, gts in zip(preds_per_query, gts_per_query)
    ]
    return float(np.mean(vals))


def _top1_best_iou(preds, gts) -> float:
    if not preds:
        return 0.0
    top = max(preds, key=lambda p: (p.confidence, -p.start))
    return max((temporal_iou(top.interval(), g) for g in gts), default=0.0)


def average_precision_101(tp_flags, num_gt: int) -> float:
    """101-point interpolated AP from a ranked TP/FP sequence."""
    if num_gt == 0:
        return 0.0
    tp_flags = np.asarray(tp_flags, dtype=float)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _match_flags(preds, gts, threshold: float):
    """Greedy matching of confidence-ranked predictions to unmatched GTs."""
    ordered = sorted(preds, key=lambda p: (-p.confidence, p.start))
    taken = [False] * len(gts)
    flags = []
    for p in ordered:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = temporal_iou(p.interval(), g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            flags.append(1.0)
        else:
            flags.append(0.0)
    return flags


def mean_ap(preds_per_query, gts_per_query, thresholds=MAP_THRESHOLDS) -> float:
    """Detection mAP: per threshold, AP is averaged over queries; the final
    score averages those per-threshold means."""
    per_threshold = []
    for t in thresholds:
        aps = [
            average_precision_101(_match_flags(preds, gts, t), len(gts))
            for preds, gts in zip(preds_per_query, gts_per_query)
        ]
        per_threshold.append(float(np.mean(aps)))
    return float(np.mean(per_threshold))


# -- highlight detection / summarization ------------------------------------


def hit_at_1(scores, positives) -> float:
    """1.0 when the highest-scored clip is labeled positive (first index wins
    score ties), else 0.0."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    return float(positives[int(np.argmax(scores))])


def ranking_ap(scores, positives) -> float:
    """Average precision of a score ranking against binary relevance."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        return 0.0
    order = np.argsort(-scores, kind="stable")
    rel = positives[order]
    hits = 0
    total = 0.0
    for rank, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / rank
    return total / positives.sum()


def top5_map(scores, annotator_ratings, budget: int = 5) -> float:
    """Summarization protocol: each annotator's top-``budget`` rated shots act
    as that annotator's reference summary; the model's shot ranking is scored
    by average precision against each reference and the results are averaged
    over annotators."""
    scores = np.asarray(scores, dtype=float)
    aps = []
    for ratings in annotator_ratings:
        ratings = np.asarray(ratings, dtype=float)
        k = min(budget, ratings.size)
        top = np.argsort(-ratings, kind="stable")[:k]
        positives = np.zeros(ratings.size, dtype=bool)
        positives[top] = True
        aps.append(ranking_ap(scores, positives))
    return float(np.mean(aps))
