"""Multi-stage segmentation network built from dilated-conv attention blocks.

Each block runs a kernel-3 dilated temporal convolution, a GELU, a windowed
attention, a long-range attention, and a residual connection; the dilation
doubles per layer and resets at every stage. Stage 1 projects the raw input
features down, runs its blocks at full width, then reduces the width further
before its prediction head. Refinement stages re-embed the previous stage's
frame-wise class probabilities and, when cross-attention is on, also use
those probabilities directly as attention queries and keys while values come
from the evolving feature stream.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import Tensor, nn

from .attention import AttentionConfig, longterm_attention, windowed_attention
from .seqdata import FeatureSequence, LabelSequence

ATTENTION_ORDERS = ("wa_then_ltc", "ltc_then_wa")
ATTENTION_MODES = ("both", "windowed_only", "longterm_only")
CONV_MODES = ("dilated", "plain", "none")


class ConfigError(Exception):
    """Inconsistent model configuration or shape mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    in_dim: int = 2048
    stage1_dim: int = 64
    refine_dim: int = 32
    num_layers: int = 9
    num_stages: int = 4
    window_size: int = 64
    group_size: int = 64
    overlap_windows: int = 2
    attention_order: str = "wa_then_ltc"
    attention_mode: str = "both"
    conv_mode: str = "dilated"
    num_heads: int = 1
    cross_attention: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("num_classes", "in_dim", "stage1_dim", "refine_dim",
                     "num_layers", "num_stages", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.attention_order not in ATTENTION_ORDERS:
            raise ConfigError(f"attention_order must be one of {ATTENTION_ORDERS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"conv_mode must be one of {CONV_MODES}")
        if self.stage1_dim % self.num_heads or self.refine_dim % self.num_heads:
            raise ConfigError("num_heads must divide stage1_dim and refine_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        # validates window/group/overlap ranges
        self.attention_config()

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.window_size, self.group_size, self.overlap_windows)


@dataclass
class StageOutput:
    features: Tensor  # (T, refine_dim)
    probs: Tensor     # (T, num_classes), rows sum to 1


class BlockAttention(nn.Module):
    """One attention unit: source projections, the attention op, an output
    linear. Self mode projects queries/keys/values from the feature stream;
    cross mode takes queries/keys verbatim from the class probabilities and
    only projects the value stream."""

    def __init__(self, dim: int, kind: str, cross: bool, config: ModelConfig):
        super().__init__()
        self.kind = kind  # "windowed" | "longterm"
        self.cross = cross
        self.num_heads = config.num_heads
        self.attn_cfg = config.attention_config()
        if not cross:
            self.q_proj = nn.Linear(dim, dim)
            self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, probs: Tensor | None) -> Tensor:
        t, dim = x.shape
        heads = self.num_heads
        if self.cross:
            if probs is None:
                raise ConfigError("cross attention requires stage probabilities")
            # probability-driven scores are shared across heads
            q = probs.unsqueeze(0).expand(heads, *probs.shape)
            k = q
        else:
            q = self.q_proj(x).reshape(t, heads, dim // heads).transpose(0, 1)
            k = self.k_proj(x).reshape(t, heads, dim // heads).transpose(0, 1)
        v = self.v_proj(x).reshape(t, heads, dim // heads).transpose(0, 1)
        if self.kind == "windowed":
            out = windowed_attention(q, k, v, self.attn_cfg)
        else:
            out = longterm_attention(q, k, v, self.attn_cfg)
        out = out.transpose(0, 1).reshape(t, dim)
        return self.out_proj(out)


class ContextBlock(nn.Module):
    """Dilated conv + GELU, two attention units, residual connection."""

    def __init__(self, dim: int, layer_index: int, cross: bool, config: ModelConfig):
        super().__init__()
        self.dilation = 2 ** layer_index if config.conv_mode == "dilated" else 1
        if config.conv_mode == "none":
            self.conv = None
        else:
            self.conv = nn.Conv1d(
                dim, dim, kernel_size=3, padding=self.dilation, dilation=self.dilation
            )
        if config.attention_mode == "both":
            kinds = ("windowed", "longterm")
            if config.attention_order == "ltc_then_wa":
                kinds = ("longterm", "windowed")
        elif config.attention_mode == "windowed_only":
            kinds = ("windowed", "windowed")
        else:
            kinds = ("longterm", "longterm")
        self.attn1 = BlockAttention(dim, kinds[0], cross, config)
        self.attn2 = BlockAttention(dim, kinds[1], cross, config)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: Tensor, probs: Tensor | None) -> Tensor:
        h = x
        if self.conv is not None:
            h = self.conv(h.t().unsqueeze(0)).squeeze(0).t()
            h = torch.nn.functional.gelu(h)
        h = self.attn1(h, probs)
        h = self.attn2(h, probs)
        return x + self.dropout(h)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.in_proj = nn.Linear(c.in_dim, c.stage1_dim)
        self.stage1_blocks = nn.ModuleList(
            ContextBlock(c.stage1_dim, layer, cross=False, config=c)
            for layer in range(c.num_layers)
        )
        self.reduce = nn.Linear(c.stage1_dim, c.refine_dim)
        self.heads = nn.ModuleList(
            nn.Linear(c.refine_dim, c.num_classes) for _ in range(c.num_stages)
        )
        self.embeds = nn.ModuleList(
            nn.Linear(c.num_classes, c.refine_dim) for _ in range(c.num_stages - 1)
        )
        self.refine_stages = nn.ModuleList(
            nn.ModuleList(
                ContextBlock(c.refine_dim, layer, cross=c.cross_attention, config=c)
                for layer in range(c.num_layers)
            )
            for _ in range(c.num_stages - 1)
        )

    def forward(self, x: Tensor) -> list[StageOutput]:
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ConfigError(
                f"expected input (T, {self.config.in_dim}), got {tuple(x.shape)}"
            )
        f = self.in_proj(x)
        for block in self.stage1_blocks:
            f = block(f, None)
        f = self.reduce(f)
        probs = torch.softmax(self.heads[0](f), dim=-1)
        outputs = [StageOutput(f, probs)]
        for stage in range(1, self.config.num_stages):
            g = self.embeds[stage - 1](probs)
            ctx = probs if self.config.cross_attention else None
            for block in self.refine_stages[stage - 1]:
                g = block(g, ctx)
            probs = torch.softmax(self.heads[stage](g), dim=-1)
            outputs.append(StageOutput(g, probs))
        return outputs


# ---------------------------------------------------------------------------
# parameter accounting and initialization


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _block_params(dim: int, cross: bool, config: ModelConfig) -> int:
    conv = 0 if config.conv_mode == "none" else 3 * dim * dim + dim
    attn = _linear_params(dim, dim) * (2 if cross else 4)
    return conv + 2 * attn


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters the model allocates."""
    c = config
    stage1 = (
        _linear_params(c.in_dim, c.stage1_dim)
        + c.num_layers * _block_params(c.stage1_dim, False, c)
        + _linear_params(c.stage1_dim, c.refine_dim)
        + _linear_params(c.refine_dim, c.num_classes)
    )
    refine = (
        _linear_params(c.num_classes, c.refine_dim)
        + c.num_layers * _block_params(c.refine_dim, c.cross_attention, c)
        + _linear_params(c.refine_dim, c.num_classes)
    )
    return stage1 + (c.num_stages - 1) * refine


def init_params(config: ModelConfig, seed: int) -> SegmentationModel:
    """Build a model with fan-in-scaled uniform weights and zero biases."""
    model = SegmentationModel(config)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim == 1:
                p.zero_()
            else:
                fan_in = p.shape[1] * (p.shape[2] if p.ndim == 3 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=generator)
    return model


def model_forward(
    features: FeatureSequence | np.ndarray | Tensor,
    config: ModelConfig,
    params: SegmentationModel,
) -> list[StageOutput]:
    if isinstance(features, FeatureSequence):
        features = features.frames
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(np.ascontiguousarray(features))
    dtype = next(params.parameters()).dtype
    return params(features.to(dtype))


def predict_labels(outputs: list[StageOutput]) -> LabelSequence:
    """Argmax of the final stage's probabilities; ties take the lowest id."""
    if not outputs:
        raise ValueError("no stage outputs to predict from")
    probs = outputs[-1].probs.detach().cpu().numpy()
    return LabelSequence(np.argmax(probs, axis=1), num_classes=probs.shape[1])


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TSG1"


def _config_to_text(config: ModelConfig) -> str:
    items = [(f.name, getattr(config, f.name)) for f in fields(ModelConfig)]
    return "".join(f"{k}={v}\n" for k, v in sorted(items))


def _config_from_text(text: str) -> ModelConfig:
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    raw = dict(line.split("=", 1) for line in text.splitlines() if line)
    kwargs = {}
    for key, value in raw.items():
        kind = kinds.get(key)
        if kind is None:
            raise ConfigError(f"unknown checkpoint config key {key!r}")
        if kind == "bool":
            kwargs[key] = value == "True"
        elif kind == "int":
            kwargs[key] = int(value)
        elif kind == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return ModelConfig(**kwargs)


def save_checkpoint(path, model: SegmentationModel) -> None:
    """Versioned binary container; byte-stable for identical parameters."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", 1))
    cfg = _config_to_text(model.config).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = list(model.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> SegmentationModel:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if raw[:4] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != 1:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    config = _config_from_text(bytes(view[offset : offset + cfg_len]).decode())
    offset += cfg_len
    (n_tensors,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    model = SegmentationModel(config)
    params = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = bytes(view[offset : offset + name_len]).decode()
            offset += name_len
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            if name not in params:
                raise ConfigError(f"{path}: unexpected tensor {name!r}")
            target = params[name]
            if tuple(target.shape) != tuple(shape):
                raise ConfigError(
                    f"{path}: tensor {name!r} has shape {shape}, expected "
                    f"{tuple(target.shape)}"
                )
            target.copy_(torch.from_numpy(data.reshape(shape).copy()))
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ConfigError(f"{path}: missing tensors {sorted(missing)}")
    return model
