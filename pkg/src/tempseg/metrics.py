"""Frame accuracy, segmental edit score, and segmental F1 at IoU thresholds.

The edit score compares the order of segment classes only (normalised
Levenshtein similarity). Segmental F1 matches each predicted segment, in
temporal order, to the highest-IoU unmatched ground-truth segment of the same
class; the match counts when IoU meets the threshold (inclusive). Dataset
aggregation pools F1 counts and frame counts across videos and averages the
edit score per video.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .seqdata import LabelSequence, SegmentList, segments_from_labels

F1_THRESHOLDS = (0.10, 0.25, 0.50)

REPORT_FIELDS = ("f1_10", "f1_25", "f1_50", "edit", "acc")


@dataclass(frozen=True)
class MetricsReport:
    f1_10: float
    f1_25: float
    f1_50: float
    edit: float
    acc: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    def to_json(self) -> str:
        return json.dumps({k: round(v, 4) for k, v in self.as_dict().items()})

    def csv_row(self) -> list[str]:
        return [f"{getattr(self, name):.4f}" for name in REPORT_FIELDS]


def _labels_array(labels) -> np.ndarray:
    if isinstance(labels, LabelSequence):
        return labels.labels
    return np.asarray(labels)


def frame_accuracy(pred, gt) -> float:
    """Percentage of frames with matching class ids."""
    p, g = _labels_array(pred), _labels_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    return 100.0 * float(np.mean(p == g))


def levenshtein(a: list[int], b: list[int]) -> int:
    """Unit-cost edit distance by dynamic programming."""
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_score(pred_seg: SegmentList, gt_seg: SegmentList) -> float:
    """100 * (1 - normalised Levenshtein distance of the class strings)."""
    p, g = pred_seg.class_ids(), gt_seg.class_ids()
    if not p and not g:
        return 100.0
    if not p or not g:
        return 0.0
    return 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))


def _segment_iou(a, b) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def f1_counts(
    pred_seg: SegmentList, gt_seg: SegmentList, threshold: float
) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives) at one IoU threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    matched = [False] * len(gt_seg.segments)
    tp = fp = 0
    for pred in pred_seg.segments:
        best, best_iou = None, 0.0
        for idx, gt in enumerate(gt_seg.segments):
            if matched[idx] or gt.class_id != pred.class_id:
                continue
            iou = _segment_iou(pred, gt)
            if iou >= threshold and iou > best_iou:
                best, best_iou = idx, iou
        if best is not None:
            matched[best] = True
            tp += 1
        else:
            fp += 1
    fn = matched.count(False)
    return tp, fp, fn


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 100.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_at(pred_seg: SegmentList, gt_seg: SegmentList, threshold: float) -> float:
    return _f1_from_counts(*f1_counts(pred_seg, gt_seg, threshold))


def evaluate(pred, gt) -> MetricsReport:
    """All five metrics for one prediction/ground-truth pair."""
    acc = MetricsAccumulator()
    acc.add(pred, gt)
    return acc.report()


def final_segment_accuracy(pred, gt) -> float:
    """Frame accuracy restricted to the last ground-truth segment."""
    p, g = _labels_array(pred), _labels_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    last = segments_from_labels(LabelSequence(g, int(g.max()) + 1)).segments[-1]
    return 100.0 * float(np.mean(p[last.start : last.end] == g[last.start : last.end]))


class MetricsAccumulator:
    """Pools per-video results into one dataset-level report."""

    def __init__(self):
        self.counts = {t: [0, 0, 0] for t in F1_THRESHOLDS}
        self.edit_scores: list[float] = []
        self.correct_frames = 0
        self.total_frames = 0

    def add(self, pred, gt) -> MetricsReport:
        p, g = _labels_array(pred), _labels_array(gt)
        if p.shape != g.shape:
            raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
        n_classes = int(max(p.max(), g.max())) + 1
        pred_seg = segments_from_labels(LabelSequence(p, n_classes))
        gt_seg = segments_from_labels(LabelSequence(g, n_classes))
        video_counts = {}
        for t in F1_THRESHOLDS:
            tp, fp, fn = f1_counts(pred_seg, gt_seg, t)
            video_counts[t] = (tp, fp, fn)
            pooled = self.counts[t]
            pooled[0] += tp
            pooled[1] += fp
            pooled[2] += fn
        edit = edit_score(pred_seg, gt_seg)
        self.edit_scores.append(edit)
        self.correct_frames += int(np.sum(p == g))
        self.total_frames += p.shape[0]
        return MetricsReport(
            *(_f1_from_counts(*video_counts[t]) for t in F1_THRESHOLDS),
            edit,
            100.0 * float(np.mean(p == g)),
        )

    def report(self) -> MetricsReport:
        if not self.edit_scores:
            raise ValueError("no videos accumulated")
        return MetricsReport(
            *(_f1_from_counts(*self.counts[t]) for t in F1_THRESHOLDS),
            float(np.mean(self.edit_scores)),
            100.0 * self.correct_frames / self.total_frames,
        )
