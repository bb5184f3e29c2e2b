"""Command-line surface.

Commands: train, eval, predict, context-study, downsample-study, ablate,
synth. Run configuration comes from a flat "key = value" text file (``#``
starts a comment); --seed and --out override the file. Exit codes: 0 success,
1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import torch

from .attention import DegenerateAttentionError
from .metrics import REPORT_FIELDS
from .model import (
    ConfigError,
    ModelConfig,
    load_checkpoint,
    model_forward,
    predict_labels,
    save_checkpoint,
)
from .plots import write_line_chart
from .seqdata import (
    DataError,
    FormatError,
    SynthSpec,
    VideoSet,
    load_dataset,
    load_manifest,
    save_labels,
    synth_generate,
    write_dataset,
)
from .studies import (
    ablation_study,
    context_study,
    downsample_study,
    evaluate_model,
)
from .train import TrainConfig, TrainingError, fit


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration files

_MODEL_KEYS = {
    "in_dim": int,
    "num_classes": int,
    "stage1_dim": int,
    "refine_dim": int,
    "num_layers": int,
    "num_stages": int,
    "window_size": int,
    "group_size": int,
    "overlap_windows": int,
    "attention_order": str,
    "attention_mode": str,
    "conv_mode": str,
    "num_heads": int,
    "cross_attention": bool,
    "dropout": float,
}

_TRAIN_KEYS = {
    "epochs": int,
    "base_lr": float,
    "final_lr": float,
    "decay_start_epoch": int,
    "schedule": str,
    "smooth_weight": float,
    "smooth_clamp": float,
    "smooth_stop_gradient": bool,
    "batch_videos": int,
    "shuffle": bool,
    "seed": int,
}

_OTHER_KEYS = {
    "train_manifest": str,
    "test_manifest": str,
    "mapping": str,
    "out_dir": str,
    "context_fractions": "list_float",
    "context_mode": str,
    "downsample_rates": "list_int",
    "ablate_axis": str,
    "ablate_values": "list_str",
}


def _parse_value(kind, raw: str):
    if kind is bool:
        if raw.lower() in ("true", "on", "1", "yes"):
            return True
        if raw.lower() in ("false", "off", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if kind == "list_float":
        return [float(v) for v in raw.split(",") if v.strip()]
    if kind == "list_int":
        return [int(v) for v in raw.split(",") if v.strip()]
    if kind == "list_str":
        return [v.strip() for v in raw.split(",") if v.strip()]
    return kind(raw)


def parse_config_file(path: str | Path) -> dict:
    """Flat 'key = value' file into a typed dict."""
    schema = {**_MODEL_KEYS, **_TRAIN_KEYS, **_OTHER_KEYS}
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(schema[key], raw)
        except ValueError as err:
            raise UsageError(f"{path}:{lineno}: {err}") from err
    return values


@dataclasses.dataclass
class RunConfig:
    values: dict
    config_dir: Path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        return cls(parse_config_file(path), path.parent)

    def path(self, key: str) -> Path | None:
        raw = self.values.get(key)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.config_dir / p

    def require_path(self, key: str) -> Path:
        p = self.path(key)
        if p is None:
            raise UsageError(f"config is missing required key {key!r}")
        return p

    def model_config(self, data: VideoSet) -> ModelConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _MODEL_KEYS}
        kwargs.setdefault("num_classes", data.num_classes)
        kwargs.setdefault("in_dim", data.videos[0][0].feature_dim)
        return ModelConfig(**kwargs)

    def train_config(self, seed_override: int | None = None) -> TrainConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _TRAIN_KEYS}
        if seed_override is not None:
            kwargs["seed"] = seed_override
        return TrainConfig(**kwargs)


def write_resolved_config(
    path: Path, model_cfg: ModelConfig, train_cfg: TrainConfig, extra: dict
) -> None:
    lines = []
    for cfg in (model_cfg, train_cfg):
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for key, value in extra.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(sorted(lines)) + "\n")


def _load_split(run: RunConfig, key: str) -> VideoSet:
    manifest = load_manifest(run.require_path(key), run.require_path("mapping"))
    return load_dataset(manifest)


def _out_dir(run: RunConfig, override: str | None) -> Path:
    if override:
        out = Path(override)
    else:
        out = run.path("out_dir")
        if out is None:
            raise UsageError("no output directory: set out_dir or pass --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = list(rows[0])
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [f"{v:.4f}" if isinstance(v, float) else v for v in (row[k] for k in header)]
            )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    train_set = _load_split(run, "train_manifest")
    model_cfg = run.model_config(train_set)
    train_cfg = run.train_config(args.seed)
    out = _out_dir(run, args.out)
    model, history = fit(
        train_set, model_cfg, train_cfg, checkpoint_path=out / "model.ckpt"
    )
    save_checkpoint(out / "model.ckpt", model)
    history.write_csv(out / "history.csv")
    write_resolved_config(
        out / "resolved.cfg", model_cfg, train_cfg,
        {k: run.values.get(k) for k in _OTHER_KEYS},
    )
    final = history.records[-1]
    print(f"trained {train_cfg.epochs} epochs; final loss {final.loss_total:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _eval_data(args) -> tuple:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, args.mapping)
    data = load_dataset(manifest)
    dim = data.videos[0][0].feature_dim
    if dim != model.config.in_dim:
        raise ConfigError(
            f"checkpoint expects {model.config.in_dim}-dim features, "
            f"manifest provides {dim}"
        )
    if data.num_classes != model.config.num_classes:
        raise ConfigError(
            f"checkpoint has {model.config.num_classes} classes, "
            f"mapping has {data.num_classes}"
        )
    return model, data


def cmd_eval(args) -> int:
    model, data = _eval_data(args)
    report, per_video, _ = evaluate_model(model, data)
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    with open(out / "per_video.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["video_id", *REPORT_FIELDS])
        for video_id, rep in per_video:
            writer.writerow([video_id, *rep.csv_row()])
    print(report.to_json())
    return 0


def cmd_predict(args) -> int:
    model, data = _eval_data(args)
    out = Path(args.out) if args.out else Path(".")
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for features, _ in data.videos:
            pred = predict_labels(model_forward(features, model.config, model))
            save_labels(pred_dir / f"{features.video_id}.txt", pred, data.class_names)
    print(f"wrote {len(data.videos)} prediction files to {pred_dir}")
    return 0


def cmd_context_study(args) -> int:
    run = RunConfig.load(args.config)
    train_set = _load_split(run, "train_manifest")
    test_set = _load_split(run, "test_manifest")
    fractions = run.values.get("context_fractions")
    if not fractions:
        raise UsageError("config is missing context_fractions")
    mode = run.values.get("context_mode", "fixed")
    if mode not in ("fixed", "video_specific"):
        raise UsageError(f"context_mode must be fixed or video_specific, got {mode!r}")
    model_cfg = run.model_config(train_set)
    train_cfg = run.train_config(args.seed)
    out = _out_dir(run, args.out)
    rows = context_study(train_set, test_set, model_cfg, train_cfg, fractions, mode)
    _write_rows_csv(out / "context_study.csv", rows)
    write_line_chart(
        out / "context_study.svg",
        [row["fraction"] for row in rows],
        {m: [row[m] for row in rows] for m in (*REPORT_FIELDS, "last_seg_acc")},
        title="Effect of temporal context",
        x_label="context fraction",
        y_label="score",
    )
    print(f"context study: {len(rows)} fractions -> {out / 'context_study.csv'}")
    return 0


def cmd_downsample_study(args) -> int:
    run = RunConfig.load(args.config)
    train_set = _load_split(run, "train_manifest")
    test_set = _load_split(run, "test_manifest")
    rates = run.values.get("downsample_rates")
    if not rates:
        raise UsageError("config is missing downsample_rates")
    model_cfg = run.model_config(train_set)
    train_cfg = run.train_config(args.seed)
    out = _out_dir(run, args.out)
    rows = downsample_study(train_set, test_set, model_cfg, train_cfg, rates)
    _write_rows_csv(out / "downsample_study.csv", rows)
    write_line_chart(
        out / "downsample_study.svg",
        [row["rate"] for row in rows],
        {m: [row[m] for row in rows] for m in REPORT_FIELDS},
        title="Effect of temporal downsampling",
        x_label="downsampling rate",
        y_label="score",
    )
    print(f"downsample study: {len(rows)} rates -> {out / 'downsample_study.csv'}")
    return 0


def cmd_ablate(args) -> int:
    run = RunConfig.load(args.config)
    train_set = _load_split(run, "train_manifest")
    test_set = _load_split(run, "test_manifest")
    axis = args.axis or run.values.get("ablate_axis")
    values = args.values or run.values.get("ablate_values")
    if not axis or not values:
        raise UsageError("ablate needs an axis and values (flags or config keys)")
    model_cfg = run.model_config(train_set)
    train_cfg = run.train_config(args.seed)
    out = _out_dir(run, args.out)
    try:
        rows = ablation_study(train_set, test_set, model_cfg, train_cfg, axis, values)
    except ValueError as err:
        raise UsageError(str(err)) from err
    _write_rows_csv(out / "ablation.csv", rows)
    print(f"ablation over {axis}: {len(rows)} rows -> {out / 'ablation.csv'}")
    return 0


def cmd_synth(args) -> int:
    raw = parse_synth_spec(args.spec)
    spec = SynthSpec(**raw)
    data = synth_generate(spec, args.seed if args.seed is not None else 0)
    out = Path(args.out) if args.out else Path(".")
    manifest = write_dataset(data, out, split=args.split)
    print(f"wrote {len(data.videos)} videos to {out} (manifest: {manifest})")
    return 0


_SYNTH_KEYS = {
    "num_videos": int,
    "frames_per_video": int,
    "num_classes": int,
    "mean_segment_length": int,
    "feature_dim": int,
    "noise_scale": float,
    "long_range_flag": bool,
}


def parse_synth_spec(path: str | Path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SYNTH_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(_SYNTH_KEYS[key], raw)
    return values


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tempseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        return p

    p = add("train", cmd_train, help="train a model from a config file")
    p.add_argument("--config", required=True)

    for name, func in (("eval", cmd_eval), ("predict", cmd_predict)):
        p = add(name, func, help=f"{name} a checkpoint on a manifest")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--mapping", required=True)

    p = add("context-study", cmd_context_study,
            help="train per context fraction, evaluate on full videos")
    p.add_argument("--config", required=True)

    p = add("downsample-study", cmd_downsample_study,
            help="train/evaluate per downsampling rate")
    p.add_argument("--config", required=True)

    p = add("ablate", cmd_ablate, help="sweep one configuration axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", default=None)
    p.add_argument("--values", default=None,
                   help="comma-separated values for the axis")

    p = add("synth", cmd_synth, help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--split", type=int, default=None,
                   help="also write train/test manifests split at this index")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "values", None):
            args.values = [v.strip() for v in args.values.split(",")]
        return args.func(args)
    except (UsageError, ValueError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (FormatError, DataError, ConfigError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except (TrainingError, DegenerateAttentionError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
