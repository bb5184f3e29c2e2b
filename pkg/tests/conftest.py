"""Shared independent oracles used across the suite.

These deliberately avoid the library's own code paths: attention is evaluated
directly from its definition in double precision, and segment matching is
solved exactly with augmenting paths.
"""

import numpy as np
import pytest


def numpy_dense_attention(q, k, v, key_mask=None):
    """Direct double-precision softmax(Q K^T / sqrt(d_qk)) V."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    scores = q @ k.T / np.sqrt(q.shape[1])
    if key_mask is not None:
        scores[:, ~np.asarray(key_mask)] = -np.inf
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return weights @ v


def maximum_matching_counts(pred_segs, gt_segs, threshold):
    """Exact maximum bipartite matching of predictions to ground-truth
    segments (same class, IoU >= threshold), via Kuhn's augmenting paths."""

    def iou(a, b):
        inter = min(a.end, b.end) - max(a.start, b.start)
        if inter <= 0:
            return 0.0
        return inter / (max(a.end, b.end) - min(a.start, b.start))

    edges = [
        [
            j
            for j, g in enumerate(gt_segs)
            if g.class_id == p.class_id and iou(p, g) >= threshold
        ]
        for p in pred_segs
    ]
    match_of_gt = [-1] * len(gt_segs)

    def augment(i, visited):
        for j in edges[i]:
            if j in visited:
                continue
            visited.add(j)
            if match_of_gt[j] == -1 or augment(match_of_gt[j], visited):
                match_of_gt[j] = i
                return True
        return False

    tp = sum(augment(i, set()) for i in range(len(pred_segs)))
    return tp, len(pred_segs) - tp, len(gt_segs) - tp


def random_label_array(rng, max_segments=6, num_classes=4, max_len=12):
    """Random short label sequence with a bounded number of segments."""
    n_segments = int(rng.integers(1, max_segments + 1))
    labels = []
    prev = None
    for _ in range(n_segments):
        if prev is None:
            cls = int(rng.integers(num_classes))
        else:
            cls = int(rng.integers(num_classes - 1))
            if cls >= prev:
                cls += 1
        length = int(rng.integers(1, max_len + 1))
        labels.extend([cls] * length)
        prev = cls
    return np.array(labels, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
