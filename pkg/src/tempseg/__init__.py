"""Temporal action segmentation with windowed and sparse long-range attention
inside a multi-stage dilated temporal convolution network."""

from .attention import (
    AttentionConfig,
    DegenerateAttentionError,
    PartitionPlan,
    count_scores,
    dense_attention,
    longterm_attention,
    stride_partition,
    stride_unpartition,
    window_partition,
    window_unpartition,
    windowed_attention,
)
from .metrics import (
    MetricsAccumulator,
    MetricsReport,
    edit_score,
    evaluate,
    f1_at,
    frame_accuracy,
)
from .model import (
    ConfigError,
    ModelConfig,
    SegmentationModel,
    StageOutput,
    init_params,
    load_checkpoint,
    model_forward,
    param_count,
    predict_labels,
    save_checkpoint,
)
from .seqdata import (
    DataError,
    DatasetManifest,
    FeatureSequence,
    FormatError,
    LabelSequence,
    SegmentList,
    SynthSpec,
    VideoSet,
    chunk_sequence,
    downsample,
    labels_from_segments,
    load_dataset,
    load_features,
    load_labels,
    load_manifest,
    save_features,
    segments_from_labels,
    synth_generate,
    write_dataset,
)
from .train import TrainConfig, TrainHistory, TrainingError, backward, fit, loss_ce, loss_smooth, lr_at, total_loss

__all__ = [name for name in dir() if not name.startswith("_")]
