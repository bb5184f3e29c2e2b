"""Dense, windowed, and strided long-range attention over frame sequences.

All operations take row-major (T, d) tensors, or (H, T, d) for multi-head
stacks, and preserve the input dtype. Windowed attention partitions the
sequence into windows of size W whose keys and values extend into the
following ``overlap_windows - 1`` windows; long-range attention groups every
G-th frame together so each group spans the whole sequence sparsely. Padded
slots are zero-filled and masked, so they contribute exactly zero weight.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
from torch import Tensor


class DegenerateAttentionError(Exception):
    """Raised when a query row has no valid key to attend to."""


@dataclass(frozen=True)
class AttentionConfig:
    window_size: int = 64      # W: local window length
    group_size: int = 64       # G: stride between frames of one long-range group
    overlap_windows: int = 2   # windows spanned by keys/values (1 = none)

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.overlap_windows not in (1, 2, 3):
            raise ValueError("overlap_windows must be 1, 2, or 3")


@dataclass(frozen=True)
class PartitionPlan:
    """Bookkeeping to undo a window or stride partition exactly."""

    length: int        # original T
    size: int          # W (window) or G (stride)
    num_groups: int
    group_length: int  # rows per group after padding
    kind: str          # "window" | "stride"

    @property
    def padded_length(self) -> int:
        return self.num_groups * self.group_length


class ScoreCounter:
    """Counts attention-score elements materialised inside the active block."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n


_active_counters: list[ScoreCounter] = []


@contextmanager
def count_scores():
    counter = ScoreCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record_scores(n: int) -> None:
    for counter in _active_counters:
        counter.add(n)


# ---------------------------------------------------------------------------
# partitions


def window_partition(x: Tensor, window_size: int) -> tuple[Tensor, PartitionPlan]:
    """(T, d) -> (ceil(T/W), W, d); the last window is zero-padded.

    Accepts leading batch dims: (..., T, d) -> (..., n, W, d).
    """
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    t = x.shape[-2]
    n = -(-t // window_size)
    pad = n * window_size - t
    if pad:
        x = torch.nn.functional.pad(x, (0, 0, 0, pad))
    groups = x.reshape(*x.shape[:-2], n, window_size, x.shape[-1])
    plan = PartitionPlan(t, window_size, n, window_size, "window")
    return groups, plan


def window_unpartition(groups: Tensor, plan: PartitionPlan) -> Tensor:
    flat = groups.reshape(*groups.shape[:-3], plan.padded_length, groups.shape[-1])
    return flat[..., : plan.length, :]


def stride_partition(x: Tensor, group_size: int) -> tuple[Tensor, PartitionPlan]:
    """(T, d) -> (G, ceil(T/G), d); group p holds frames p, p+G, p+2G, ...

    Accepts leading batch dims. Pad rows (original index >= T) are zero.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    t = x.shape[-2]
    rows = -(-t // group_size)
    pad = rows * group_size - t
    if pad:
        x = torch.nn.functional.pad(x, (0, 0, 0, pad))
    groups = x.reshape(*x.shape[:-2], rows, group_size, x.shape[-1]).transpose(-3, -2)
    plan = PartitionPlan(t, group_size, group_size, rows, "stride")
    return groups, plan


def stride_unpartition(groups: Tensor, plan: PartitionPlan) -> Tensor:
    flat = groups.transpose(-3, -2).reshape(
        *groups.shape[:-3], plan.padded_length, groups.shape[-1]
    )
    return flat[..., : plan.length, :]


def partition_masks(plan: PartitionPlan, device=None) -> Tensor:
    """Boolean (num_groups, group_length) mask of non-pad slots."""
    if plan.kind == "window":
        idx = torch.arange(plan.num_groups, device=device)[:, None] * plan.size
        idx = idx + torch.arange(plan.size, device=device)[None, :]
    else:
        idx = torch.arange(plan.num_groups, device=device)[:, None]
        idx = idx + torch.arange(plan.group_length, device=device)[None, :] * plan.size
    return idx < plan.length


# ---------------------------------------------------------------------------
# attention kernels


def _masked_rows_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor) -> Tensor:
    """Batched softmax(q k^T / sqrt(d)) v with per-group key masks.

    Shapes: q (..., n, Lq, dq), k (..., n, Lk, dq), v (..., n, Lk, dv),
    key_mask (n, Lk) boolean. Rows whose groups have no valid key produce
    zeros; such rows only ever correspond to padding.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    _record_scores(scores.numel())
    mask = key_mask[..., None, :]  # broadcast over query rows
    group_valid = key_mask.any(dim=-1)[..., None, None]
    scores = scores.masked_fill(~mask, float("-inf"))
    scores = torch.where(group_valid, scores, torch.zeros_like(scores))
    weights = torch.softmax(scores, dim=-1)
    weights = weights * group_valid
    return torch.matmul(weights, v)


def dense_attention(
    q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None
) -> Tensor:
    """Full softmax(Q K^T / sqrt(d_qk)) V over the whole sequence.

    ``key_mask`` flags valid keys; masked keys get exactly zero weight. If no
    key is valid the attention is degenerate and raises.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    if key_mask is not None and not bool(key_mask.any()):
        raise DegenerateAttentionError("every key is masked")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    _record_scores(scores.numel())
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    return torch.matmul(torch.softmax(scores, dim=-1), v)


def windowed_attention(
    q_src: Tensor, k_src: Tensor, v_src: Tensor, cfg: AttentionConfig
) -> Tensor:
    """Local attention: queries per window of size W, keys/values spanning the
    current plus the next ``overlap_windows - 1`` windows, masked at the end of
    the sequence. Output rows keep the input order.
    """
    t = q_src.shape[-2]
    w = cfg.window_size
    span = cfg.overlap_windows * w
    q_groups, plan = window_partition(q_src, w)
    device = q_src.device
    key_idx = torch.arange(plan.num_groups, device=device)[:, None] * w
    key_idx = key_idx + torch.arange(span, device=device)[None, :]
    key_mask = key_idx < t
    gather = key_idx.clamp(max=t - 1)
    k_groups = k_src.index_select(-2, gather.reshape(-1)).reshape(
        *k_src.shape[:-2], plan.num_groups, span, k_src.shape[-1]
    )
    v_groups = v_src.index_select(-2, gather.reshape(-1)).reshape(
        *v_src.shape[:-2], plan.num_groups, span, v_src.shape[-1]
    )
    # zero out-of-range slots so pad content is auditable, not just masked
    k_groups = k_groups * key_mask[..., None]
    v_groups = v_groups * key_mask[..., None]
    out = _masked_rows_attention(q_groups, k_groups, v_groups, key_mask)
    return window_unpartition(out, plan)


def longterm_attention(
    q_src: Tensor, k_src: Tensor, v_src: Tensor, cfg: AttentionConfig
) -> Tensor:
    """Sparse long-range attention: every G-th frame forms a group and full
    attention runs inside each group, so each query sees the entire sequence
    at stride G. G=1 is dense attention over the full sequence.
    """
    g = cfg.group_size
    q_groups, plan = stride_partition(q_src, g)
    k_groups, _ = stride_partition(k_src, g)
    v_groups, _ = stride_partition(v_src, g)
    key_mask = partition_masks(plan, device=q_src.device)
    out = _masked_rows_attention(q_groups, k_groups, v_groups, key_mask)
    return stride_unpartition(out, plan)
