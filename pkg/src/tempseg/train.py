"""Multi-stage loss, learning-rate schedule, and the training loop.

The loss per stage is frame-wise cross-entropy plus a weighted smoothing term
that penalises large jumps between adjacent frames' log-probabilities,
truncated at a threshold. Optimisation is Adam with either a fixed learning
rate or a cosine decay that kicks in after a configurable epoch. Training
steps once per video (videos have different lengths), in a seeded shuffled
order, and is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import random
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .model import ModelConfig, SegmentationModel, StageOutput, init_params, save_checkpoint
from .seqdata import DatasetManifest, LabelSequence, VideoSet, load_dataset

PROB_FLOOR = 1e-12

SCHEDULES = ("fixed", "cosine")

# per-dataset-profile defaults: (epochs, schedule, base_lr, final_lr, decay_start)
PROFILES = {
    "breakfast": (150, "cosine", 0.00025, 0.00005, 15),
    "assembly": (120, "cosine", 0.00025, 0.00005, 15),
    "salads": (200, "fixed", 0.00065, 0.00065, 0),
}


class TrainingError(Exception):
    """Non-finite loss or gradient during optimisation."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    base_lr: float = 0.00065
    final_lr: float = 0.00005
    decay_start_epoch: int = 15
    schedule: str = "fixed"
    smooth_weight: float = 0.15       # weight of the smoothing term
    smooth_clamp: float = 16.0        # truncation threshold on |delta log p|
    smooth_stop_gradient: bool = True
    batch_videos: int = 1
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")
        if self.smooth_clamp <= 0:
            raise ValueError("smooth_clamp must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.batch_videos < 1:
            raise ValueError("batch_videos must be >= 1")

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        epochs, schedule, base_lr, final_lr, decay_start = PROFILES[name]
        defaults = dict(
            epochs=epochs, schedule=schedule, base_lr=base_lr,
            final_lr=final_lr, decay_start_epoch=decay_start,
        )
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_smooth: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord]

    def write_csv(self, path) -> None:
        # wall time stays out of the file so reruns are byte-identical
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "loss_total", "loss_ce", "loss_smooth"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, f"{r.lr:.10g}", f"{r.loss_total:.10g}",
                     f"{r.loss_ce:.10g}", f"{r.loss_smooth:.10g}"]
                )


# ---------------------------------------------------------------------------
# losses


def _as_label_tensor(labels) -> Tensor:
    if isinstance(labels, LabelSequence):
        labels = labels.labels
    if isinstance(labels, np.ndarray):
        return torch.from_numpy(labels)
    return labels


def loss_ce(probs: Tensor, labels) -> Tensor:
    """Mean negative log probability of the true class per frame."""
    target = _as_label_tensor(labels)
    if probs.shape[0] != target.shape[0]:
        raise ValueError(
            f"{probs.shape[0]} probability rows vs {target.shape[0]} labels"
        )
    picked = probs.gather(1, target.view(-1, 1)).squeeze(1)
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def loss_smooth(
    probs: Tensor, clamp: float = 16.0, stop_gradient: bool = True
) -> Tensor:
    """Mean squared adjacent-frame log-probability difference, truncated at
    ``clamp``. The previous frame is treated as a constant unless
    ``stop_gradient`` is off. Sequences shorter than 2 frames score 0."""
    if probs.shape[0] < 2:
        return probs.new_zeros(())
    logp = probs.clamp_min(PROB_FLOOR).log()
    prev = logp[:-1].detach() if stop_gradient else logp[:-1]
    delta = (logp[1:] - prev).abs().clamp(max=clamp)
    return (delta ** 2).mean()


def total_loss(
    outputs: list[StageOutput],
    labels,
    smooth_weight: float = 0.15,
    smooth_clamp: float = 16.0,
    stop_gradient: bool = True,
) -> Tensor:
    """Sum over stages of cross-entropy plus the weighted smoothing term."""
    if not outputs:
        raise ValueError("need at least one stage output")
    total = outputs[0].probs.new_zeros(())
    for out in outputs:
        total = total + loss_ce(out.probs, labels)
        if smooth_weight:
            total = total + smooth_weight * loss_smooth(
                out.probs, smooth_clamp, stop_gradient
            )
    return total


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a zero-based epoch index."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.schedule == "fixed":
        return cfg.base_lr
    if epoch < cfg.decay_start_epoch:
        return cfg.base_lr
    span = cfg.epochs - 1 - cfg.decay_start_epoch
    if span <= 0:
        return cfg.final_lr
    frac = (epoch - cfg.decay_start_epoch) / span
    return float(
        cfg.final_lr
        + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + np.cos(np.pi * frac))
    )


def backward(loss: Tensor, model: SegmentationModel) -> dict[str, Tensor]:
    """Populate and return gradients for every parameter, validating
    finiteness; raises TrainingError naming the offending tensor."""
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            raise TrainingError(f"parameter {name} received no gradient")
        if not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name}")
        grads[name] = p.grad
    return grads


# ---------------------------------------------------------------------------
# fit


def fit(
    data: VideoSet | DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[SegmentationModel, TrainHistory]:
    """Train from scratch; deterministic for fixed (data, configs, seed)."""
    if isinstance(data, DatasetManifest):
        data = load_dataset(data)
    if not data.videos:
        raise ValueError("dataset is empty")
    cfg = train_config
    torch.manual_seed(cfg.seed)
    model = init_params(model_config, cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8
    )
    order_rng = random.Random(cfg.seed)
    tensors = [
        (torch.from_numpy(f.frames), torch.from_numpy(l.labels), f.video_id)
        for f, l in data.videos
    ]
    records = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = list(range(len(tensors)))
        if cfg.shuffle:
            order_rng.shuffle(order)
        sum_total = sum_ce = sum_smooth = 0.0
        optimizer.zero_grad()
        pending = 0
        for step, idx in enumerate(order):
            frames, labels, video_id = tensors[idx]
            try:
                outputs = model(frames)
                ce = sum(loss_ce(o.probs, labels) for o in outputs)
                smooth = sum(
                    loss_smooth(o.probs, cfg.smooth_clamp, cfg.smooth_stop_gradient)
                    for o in outputs
                )
                loss = ce + cfg.smooth_weight * smooth
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()}")
                (loss / cfg.batch_videos).backward()
            except TrainingError as err:
                raise TrainingError(f"video {video_id!r}: {err}") from err
            pending += 1
            if pending == cfg.batch_videos or step == len(order) - 1:
                _check_gradients(model)
                optimizer.step()
                optimizer.zero_grad()
                pending = 0
            sum_total += float(loss.detach())
            sum_ce += float(ce.detach())
            sum_smooth += float(smooth.detach())
        n = len(order)
        records.append(
            EpochRecord(
                epoch, lr, sum_total / n, sum_ce / n, sum_smooth / n,
                time.perf_counter() - started,
            )
        )
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model)
    model.eval()
    return model, TrainHistory(records)


def _check_gradients(model: SegmentationModel) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name}")
