"""Train/evaluate pipelines: plain runs, context-window and downsampling
studies, and single-axis ablation sweeps. Every run re-trains from the same
seed on the same data so rows are comparable."""

from __future__ import annotations

from dataclasses import replace

import torch

from .metrics import MetricsAccumulator, MetricsReport, final_segment_accuracy
from .model import ModelConfig, SegmentationModel, model_forward, param_count, predict_labels
from .seqdata import VideoSet, chunk_dataset, downsample_dataset
from .train import TrainConfig, TrainHistory, fit

# CLI axis token -> ModelConfig field
ABLATION_AXES = {
    "attention_mode": "attention_mode",
    "W": "window_size",
    "G": "group_size",
    "overlap_windows": "overlap_windows",
    "attention_order": "attention_order",
    "cross_attention": "cross_attention",
    "conv_mode": "conv_mode",
    "N": "num_layers",
    "heads": "num_heads",
    "S": "num_stages",
}

_INT_AXES = {"W", "G", "overlap_windows", "N", "heads", "S"}


def evaluate_model(model: SegmentationModel, data: VideoSet):
    """Returns (dataset report, per-video [(id, report)], predictions)."""
    model.eval()
    accumulator = MetricsAccumulator()
    per_video = []
    predictions = []
    with torch.no_grad():
        for features, labels in data.videos:
            outputs = model_forward(features, model.config, model)
            pred = predict_labels(outputs)
            per_video.append((features.video_id, accumulator.add(pred, labels)))
            predictions.append((features.video_id, pred))
    return accumulator.report(), per_video, predictions


def _mean_final_segment_accuracy(model: SegmentationModel, data: VideoSet) -> float:
    model.eval()
    values = []
    with torch.no_grad():
        for features, labels in data.videos:
            pred = predict_labels(model_forward(features, model.config, model))
            values.append(final_segment_accuracy(pred, labels))
    return sum(values) / len(values)


def train_and_eval(
    train_set: VideoSet,
    test_set: VideoSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> tuple[SegmentationModel, TrainHistory, MetricsReport]:
    model, history = fit(train_set, model_cfg, train_cfg)
    report, _, _ = evaluate_model(model, test_set)
    return model, history, report


def context_study(
    train_set: VideoSet,
    test_set: VideoSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    fractions: list[float],
    mode: str = "fixed",
) -> list[dict]:
    """Train on chunked sequences per fraction, evaluate on full videos.

    ``fixed`` converts each fraction of the average training-video length into
    one shared chunk window; ``video_specific`` chunks each video by its own
    length. Rows carry the five metrics plus accuracy on the final segment of
    each test video (the part that depends on far-away context in the
    long-range synthetic data).
    """
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {fraction}")
    rows = []
    for fraction in fractions:
        chunked = chunk_dataset(train_set, mode, fraction)
        model, _, report = train_and_eval(chunked, test_set, model_cfg, train_cfg)
        row = {"fraction": fraction, "num_chunks": len(chunked)}
        row.update(report.as_dict())
        row["last_seg_acc"] = _mean_final_segment_accuracy(model, test_set)
        rows.append(row)
    return rows


def downsample_study(
    train_set: VideoSet,
    test_set: VideoSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rates: list[int],
) -> list[dict]:
    """Train and evaluate at each temporal downsampling rate; labels are
    downsampled with the features and scoring happens at that resolution."""
    for rate in rates:
        if rate < 1:
            raise ValueError(f"downsample rates must be >= 1, got {rate}")
    rows = []
    for rate in rates:
        ds_train = downsample_dataset(train_set, rate)
        ds_test = downsample_dataset(test_set, rate)
        _, _, report = train_and_eval(ds_train, ds_test, model_cfg, train_cfg)
        row = {"rate": rate}
        row.update(report.as_dict())
        rows.append(row)
    return rows


def parse_ablation_value(axis: str, value: str):
    if axis not in ABLATION_AXES:
        raise ValueError(
            f"unknown ablation axis {axis!r}; valid axes: "
            + ", ".join(sorted(ABLATION_AXES))
        )
    if axis in _INT_AXES:
        return int(value)
    if axis == "cross_attention":
        if value.lower() not in ("true", "false", "on", "off"):
            raise ValueError(f"cross_attention value must be on/off, got {value!r}")
        return value.lower() in ("true", "on")
    return value


def ablation_study(
    train_set: VideoSet,
    test_set: VideoSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    axis: str,
    values: list[str],
) -> list[dict]:
    """One full train+eval per value of a single configuration axis, with the
    seed and data held fixed."""
    field = ABLATION_AXES.get(axis)
    if field is None:
        raise ValueError(
            f"unknown ablation axis {axis!r}; valid axes: "
            + ", ".join(sorted(ABLATION_AXES))
        )
    rows = []
    for raw in values:
        value = parse_ablation_value(axis, str(raw))
        cfg = replace(model_cfg, **{field: value})
        _, _, report = train_and_eval(train_set, test_set, cfg, train_cfg)
        row = {
            "axis": axis,
            "value": value,
            "seed": train_cfg.seed,
            "param_count": param_count(cfg),
        }
        row.update(report.as_dict())
        rows.append(row)
    return rows
