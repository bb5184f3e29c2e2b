"""Frame-feature sequences, labels, segments, and dataset plumbing.

Features live in small binary ".ltf" files (magic ``LTF1``, u32 frame count,
u32 feature dim, float32 row-major frames). Labels are one class-name token
per line, frame t on line t. A manifest lists videos and is paired with a
mapping file assigning dense integer ids to class names.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

LTF_MAGIC = b"LTF1"
LTF_HEADER = struct.Struct("<4sII")


class FormatError(Exception):
    """A file does not conform to its declared on-disk format."""


class DataError(Exception):
    """Loaded data violates a dataset invariant (lengths, ids, paths)."""


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame features of one video, shape (T, feature_dim), float32."""

    frames: np.ndarray
    video_id: str = ""
    frame_rate: float = 15.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(
                f"features must be a non-empty 2d matrix, got shape {frames.shape}"
            )
        if not np.isfinite(frames).all():
            raise DataError(f"non-finite feature value in video {self.video_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    """Per-frame class ids in [0, num_classes), one per frame."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1 or labels.shape[0] < 1:
            raise DataError(f"labels must be a non-empty 1d array, got {labels.shape}")
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(
                f"label id out of range [0, {self.num_classes}) in sequence"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


class Segment(NamedTuple):
    class_id: int
    start: int
    end: int  # half-open [start, end)


@dataclass(frozen=True)
class SegmentList:
    """Maximal constant-class runs tiling [0, T) with no gaps or overlaps."""

    segments: tuple[Segment, ...]
    num_classes: int | None = None

    def __post_init__(self):
        segs = tuple(Segment(*s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            return
        if segs[0].start != 0:
            raise DataError(f"segments must start at frame 0, got {segs[0].start}")
        for prev, cur in zip(segs, segs[1:]):
            if cur.start != prev.end:
                raise DataError(
                    f"gap or overlap between segments at frame {prev.end} vs {cur.start}"
                )
            if cur.class_id == prev.class_id:
                raise DataError(
                    f"adjacent segments share class {cur.class_id}; runs must be maximal"
                )
        for s in segs:
            if s.end <= s.start:
                raise DataError(f"empty segment {s}")
            if s.class_id < 0 or (
                self.num_classes is not None and s.class_id >= self.num_classes
            ):
                raise DataError(f"segment class {s.class_id} out of range")

    @property
    def num_frames(self) -> int:
        return self.segments[-1].end if self.segments else 0

    def __len__(self) -> int:
        return len(self.segments)

    def class_ids(self) -> list[int]:
        return [s.class_id for s in self.segments]


def segments_from_labels(labels: LabelSequence) -> SegmentList:
    """Run-length encode a label sequence into maximal segments."""
    arr = labels.labels
    boundaries = np.flatnonzero(arr[1:] != arr[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [arr.shape[0]]))
    segs = tuple(
        Segment(int(arr[s]), int(s), int(e)) for s, e in zip(starts, ends)
    )
    return SegmentList(segs, num_classes=labels.num_classes)


def labels_from_segments(
    segments: SegmentList, num_classes: int | None = None
) -> LabelSequence:
    """Expand segments back to one class id per frame (inverse of the above)."""
    if not segments.segments:
        raise DataError("cannot expand an empty segment list")
    n_classes = num_classes or segments.num_classes
    if n_classes is None:
        n_classes = max(s.class_id for s in segments.segments) + 1
    out = np.empty(segments.num_frames, dtype=np.int64)
    for s in segments.segments:
        out[s.start : s.end] = s.class_id
    return LabelSequence(out, num_classes=n_classes)


# ---------------------------------------------------------------------------
# binary feature files


def save_features(path: str | Path, seq: FeatureSequence) -> None:
    data = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(LTF_HEADER.pack(LTF_MAGIC, seq.num_frames, seq.feature_dim))
        f.write(data.tobytes())


def load_features(path: str | Path, video_id: str | None = None) -> FeatureSequence:
    """Read one feature file; raises FormatError naming the bad byte offset."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < LTF_HEADER.size:
        raise FormatError(f"{path}: truncated header, file is {len(raw)} bytes")
    magic, n_frames, dim = LTF_HEADER.unpack_from(raw, 0)
    if magic != LTF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if n_frames < 1 or dim < 1:
        raise FormatError(f"{path}: invalid header T={n_frames} D={dim} at offset 4")
    expected = LTF_HEADER.size + 4 * n_frames * dim
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, got {len(raw)} (payload offset "
            f"{LTF_HEADER.size})"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=LTF_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        offset = LTF_HEADER.size + 4 * int(bad[0])
        raise FormatError(f"{path}: non-finite value at offset {offset}")
    frames = flat.reshape(n_frames, dim).copy()
    return FeatureSequence(frames, video_id=video_id or path.stem)


# ---------------------------------------------------------------------------
# manifests and label files


class ManifestEntry(NamedTuple):
    video_id: str
    feature_path: Path
    label_path: Path


@dataclass(frozen=True)
class DatasetManifest:
    """Video list plus the class-name to dense-id mapping for one dataset."""

    entries: tuple[ManifestEntry, ...]
    class_to_id: dict[str, int]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = sorted(self.class_to_id.values())
        if ids != list(range(len(ids))):
            raise DataError(f"class ids must be dense in [0, C), got {ids}")
        paths = [e.feature_path for e in self.entries] + [
            e.label_path for e in self.entries
        ]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be distinct")

    @property
    def num_classes(self) -> int:
        return len(self.class_to_id)

    @property
    def class_names(self) -> list[str]:
        inverse = {i: name for name, i in self.class_to_id.items()}
        return [inverse[i] for i in range(self.num_classes)]

    def resolve(self, p: Path) -> Path:
        return p if p.is_absolute() else self.root / p


def load_mapping(path: str | Path) -> dict[str, int]:
    """Parse '<id> <class_name>' lines."""
    mapping: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno + 1}: expected '<id> <name>'")
        idx, name = parts
        mapping[name] = int(idx)
    return mapping


def save_mapping(path: str | Path, class_names: list[str]) -> None:
    with open(path, "w") as f:
        for i, name in enumerate(class_names):
            f.write(f"{i} {name}\n")


def load_manifest(manifest_path: str | Path, mapping_path: str | Path) -> DatasetManifest:
    """Parse '<video_id> <feature_path> <label_path>' lines; relative paths are
    resolved against the manifest file's directory."""
    manifest_path = Path(manifest_path)
    entries = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(
                f"{manifest_path}:{lineno + 1}: expected '<video_id> <features> <labels>'"
            )
        entries.append(ManifestEntry(parts[0], Path(parts[1]), Path(parts[2])))
    return DatasetManifest(
        tuple(entries), load_mapping(mapping_path), root=manifest_path.parent
    )


def load_labels(path: str | Path, manifest: DatasetManifest) -> LabelSequence:
    """One class-name token per line; unknown tokens report their line number."""
    ids = []
    lines = Path(path).read_text().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    for lineno, line in enumerate(lines):
        token = line.strip()
        if token not in manifest.class_to_id:
            raise DataError(f"{path}:{lineno + 1}: unknown class token {token!r}")
        ids.append(manifest.class_to_id[token])
    if not ids:
        raise DataError(f"{path}: empty label file")
    return LabelSequence(np.array(ids, dtype=np.int64), manifest.num_classes)


def save_labels(path: str | Path, labels: LabelSequence, class_names: list[str]) -> None:
    with open(path, "w") as f:
        for c in labels.labels:
            f.write(class_names[int(c)] + "\n")


@dataclass
class VideoSet:
    """In-memory dataset: parallel feature/label pairs plus class names."""

    videos: list[tuple[FeatureSequence, LabelSequence]]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.videos)

    def mean_length(self) -> float:
        return float(np.mean([f.num_frames for f, _ in self.videos]))


def load_video(entry: ManifestEntry, manifest: DatasetManifest):
    features = load_features(manifest.resolve(entry.feature_path), entry.video_id)
    labels = load_labels(manifest.resolve(entry.label_path), manifest)
    if len(labels) != features.num_frames:
        raise DataError(
            f"video {entry.video_id!r}: {len(labels)} labels for "
            f"{features.num_frames} feature frames"
        )
    return features, labels


def load_dataset(manifest: DatasetManifest) -> VideoSet:
    videos = [load_video(e, manifest) for e in manifest.entries]
    return VideoSet(videos, manifest.class_names)


# ---------------------------------------------------------------------------
# chunking and downsampling


def chunk_sequence(
    features: FeatureSequence,
    labels: LabelSequence,
    window_frames: int | None = None,
    mode: str = "fixed",
    percent: float | None = None,
) -> list[tuple[FeatureSequence, LabelSequence]]:
    """Split a video into consecutive non-overlapping chunks.

    ``fixed`` mode takes an explicit window length in frames; callers wanting a
    percentage of the dataset-average length compute that themselves.
    ``video_specific`` derives the window from ``percent`` of this video's own
    length. The final chunk keeps the remainder.
    """
    t = features.num_frames
    if mode == "fixed":
        if window_frames is None:
            raise ValueError("fixed mode requires window_frames")
        window = int(window_frames)
    elif mode == "video_specific":
        if percent is None or not (0.0 < percent <= 1.0):
            raise ValueError("video_specific mode requires percent in (0, 1]")
        window = int(np.floor(percent * t + 0.5))
    else:
        raise ValueError(f"unknown chunk mode {mode!r}")
    if window < 1:
        raise ValueError(f"chunk window must be >= 1, got {window}")
    if len(labels) != t:
        raise DataError("features and labels disagree on length")
    chunks = []
    for k, start in enumerate(range(0, t, window)):
        end = min(start + window, t)
        chunks.append(
            (
                FeatureSequence(
                    features.frames[start:end],
                    video_id=f"{features.video_id}:{k}",
                    frame_rate=features.frame_rate,
                ),
                LabelSequence(labels.labels[start:end], labels.num_classes),
            )
        )
    return chunks


def downsample(
    features: FeatureSequence, labels: LabelSequence, rate: int
) -> tuple[FeatureSequence, LabelSequence]:
    """Keep frames 0, rate, 2*rate, ...; new length is ceil(T / rate)."""
    if rate < 1:
        raise ValueError(f"downsample rate must be >= 1, got {rate}")
    if rate == 1:
        return features, labels
    return (
        FeatureSequence(
            features.frames[::rate],
            video_id=features.video_id,
            frame_rate=features.frame_rate / rate,
        ),
        LabelSequence(labels.labels[::rate], labels.num_classes),
    )


def chunk_dataset(
    data: VideoSet, mode: str, percent: float
) -> VideoSet:
    """Chunk every video; fixed mode converts ``percent`` of the dataset-average
    video length into a frame count shared by all videos."""
    if mode == "fixed":
        window = max(1, int(np.floor(percent * data.mean_length() + 0.5)))
        chunked = [
            pair
            for f, l in data.videos
            for pair in chunk_sequence(f, l, window_frames=window, mode="fixed")
        ]
    else:
        chunked = [
            pair
            for f, l in data.videos
            for pair in chunk_sequence(f, l, mode="video_specific", percent=percent)
        ]
    return VideoSet(chunked, data.class_names)


def downsample_dataset(data: VideoSet, rate: int) -> VideoSet:
    return VideoSet(
        [downsample(f, l, rate) for f, l in data.videos], data.class_names
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated dataset.

    With ``long_range_flag`` the class of each video's final segment is
    (first segment class + 1) mod C, and the final segment's frames are drawn
    from a decoy prototype shared by all classes, so the label is recoverable
    only from the far-away first segment. The first segment additionally
    carries an additive marker component so it is identifiable without any
    positional signal.
    """

    num_videos: int = 10
    frames_per_video: int = 500
    num_classes: int = 5
    mean_segment_length: int = 50
    feature_dim: int = 16
    noise_scale: float = 0.1
    long_range_flag: bool = False

    def __post_init__(self):
        for name in ("num_videos", "frames_per_video", "num_classes",
                     "mean_segment_length", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.long_range_flag and self.num_classes < 2:
            raise ValueError("long_range_flag requires at least 2 classes")
        if self.long_range_flag and self.frames_per_video < 2:
            raise ValueError("long_range_flag requires at least 2 frames per video")


def _segment_lengths(rng: np.random.Generator, spec: SynthSpec) -> list[int]:
    mean = spec.mean_segment_length
    low, high = max(1, mean // 2), max(2, mean + mean // 2)
    lengths = []
    remaining = spec.frames_per_video
    while remaining > 0:
        n = min(int(rng.integers(low, high + 1)), remaining)
        lengths.append(n)
        remaining -= n
    if spec.long_range_flag and len(lengths) == 1:
        lengths = [lengths[0] - lengths[0] // 2, lengths[0] // 2]
    if spec.long_range_flag and spec.num_classes == 2 and len(lengths) % 2 != 0:
        # with two classes the chain alternates, so an even segment count is
        # needed for the final class to land on (first + 1) mod 2
        lengths[-2] += lengths[-1]
        lengths.pop()
    return lengths


def _segment_classes(rng: np.random.Generator, spec: SynthSpec, n_segments: int) -> list[int]:
    c = spec.num_classes
    classes = [int(rng.integers(c))]
    for _ in range(1, n_segments):
        nxt = int(rng.integers(c - 1))
        if nxt >= classes[-1]:
            nxt += 1
        classes.append(nxt)
    if spec.long_range_flag and n_segments >= 2:
        final = (classes[0] + 1) % c
        classes[-1] = final
        if classes[-2] == final:
            # resample the penultimate class away from both neighbours
            options = [k for k in range(c) if k != final and
                       (n_segments < 3 or k != classes[-3])]
            classes[-2] = options[int(rng.integers(len(options)))]
    return classes


def synth_generate(spec: SynthSpec, seed: int) -> VideoSet:
    """Deterministically generate a dataset of prototype-plus-noise videos."""
    rng = np.random.default_rng(seed)
    d = spec.feature_dim
    prototypes = rng.standard_normal((spec.num_classes, d))
    start_marker = 2.0 * rng.standard_normal(d)
    decoy_prototype = rng.standard_normal(d)
    videos = []
    for v in range(spec.num_videos):
        lengths = _segment_lengths(rng, spec)
        classes = _segment_classes(rng, spec, len(lengths))
        frames = np.empty((spec.frames_per_video, d), dtype=np.float64)
        labels = np.empty(spec.frames_per_video, dtype=np.int64)
        pos = 0
        for i, (length, cls) in enumerate(zip(lengths, classes)):
            proto = prototypes[cls]
            if spec.long_range_flag and i == 0:
                proto = proto + start_marker
            elif spec.long_range_flag and i == len(lengths) - 1:
                proto = decoy_prototype
            noise = rng.standard_normal((length, d))
            frames[pos : pos + length] = proto + spec.noise_scale * noise
            labels[pos : pos + length] = cls
            pos += length
        videos.append(
            (
                FeatureSequence(frames.astype(np.float32), video_id=f"synth_{v:03d}"),
                LabelSequence(labels, spec.num_classes),
            )
        )
    class_names = [f"class{k:02d}" for k in range(spec.num_classes)]
    return VideoSet(videos, class_names)


def write_dataset(data: VideoSet, out_dir: str | Path, split: int | None = None) -> Path:
    """Write features, labels, mapping, and manifest(s) under ``out_dir``.

    Returns the main manifest path. When ``split`` is given, also writes
    ``manifest_train.txt`` (first ``split`` videos) and ``manifest_test.txt``.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    save_mapping(out / "mapping.txt", data.class_names)
    lines = []
    for features, labels in data.videos:
        vid = features.video_id
        save_features(out / "features" / f"{vid}.ltf", features)
        save_labels(out / "labels" / f"{vid}.txt", labels, data.class_names)
        lines.append(f"{vid} features/{vid}.ltf labels/{vid}.txt\n")
    manifest_path = out / "manifest.txt"
    manifest_path.write_text("".join(lines))
    if split is not None:
        (out / "manifest_train.txt").write_text("".join(lines[:split]))
        (out / "manifest_test.txt").write_text("".join(lines[split:]))
    return manifest_path
