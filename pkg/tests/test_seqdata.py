import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempseg.seqdata import (
    DataError,
    DatasetManifest,
    FeatureSequence,
    FormatError,
    LabelSequence,
    ManifestEntry,
    Segment,
    SegmentList,
    SynthSpec,
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


def make_pair(labels, dim=3, num_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = num_classes or int(labels.max()) + 1
    rng = np.random.default_rng(1)
    feats = FeatureSequence(rng.standard_normal((len(labels), dim)), video_id="v")
    return feats, LabelSequence(labels, n_classes)


# ---------------------------------------------------------------------------
# feature files


class TestFeatureFiles:
    def test_known_layout(self, tmp_path):
        path = tmp_path / "a.ltf"
        values = np.arange(6, dtype=np.float32).reshape(3, 2)
        save_features(path, FeatureSequence(values))
        raw = path.read_bytes()
        assert raw[:4] == b"LTF1"
        assert len(raw) == 12 + 24
        loaded = load_features(path)
        assert loaded.num_frames == 3 and loaded.feature_dim == 2
        np.testing.assert_array_equal(loaded.frames, values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.ltf"
        save_features(path, FeatureSequence(np.ones((2, 2))))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_features(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.ltf"
        save_features(path, FeatureSequence(np.ones((4, 4))))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="expected"):
            load_features(path)

    def test_non_finite_reports_offset(self, tmp_path):
        path = tmp_path / "a.ltf"
        frames = np.ones((2, 2), dtype=np.float32)
        save_features(path, FeatureSequence(frames))
        raw = bytearray(path.read_bytes())
        raw[12 + 4 * 3 : 12 + 4 * 4] = np.float32(np.nan).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match=str(12 + 4 * 3)):
            load_features(path)

    def test_round_trip_random(self, tmp_path, rng):
        frames = rng.standard_normal((50, 8)).astype(np.float32)
        path = tmp_path / "r.ltf"
        save_features(path, FeatureSequence(frames, video_id="r"))
        np.testing.assert_array_equal(load_features(path).frames, frames)


# ---------------------------------------------------------------------------
# labels and segments


def manifest_with(mapping):
    return DatasetManifest(entries=(), class_to_id=mapping)


class TestLabels:
    def test_token_lookup(self, tmp_path):
        path = tmp_path / "l.txt"
        path.write_text("cut\ncut\nmix\n")
        labels = load_labels(path, manifest_with({"cut": 0, "mix": 1}))
        np.testing.assert_array_equal(labels.labels, [0, 0, 1])

    def test_unknown_token_names_line(self, tmp_path):
        path = tmp_path / "l.txt"
        path.write_text("cut\npour\n")
        with pytest.raises(DataError, match=r":2"):
            load_labels(path, manifest_with({"cut": 0, "mix": 1}))

    def test_out_of_range_label_rejected(self):
        with pytest.raises(DataError):
            LabelSequence(np.array([0, 3]), num_classes=2)


class TestSegments:
    def test_run_length(self):
        labels = LabelSequence(np.array([0, 0, 1, 1, 1, 0]), 2)
        segs = segments_from_labels(labels)
        assert segs.segments == (Segment(0, 0, 2), Segment(1, 2, 5), Segment(0, 5, 6))

    def test_singleton(self):
        segs = segments_from_labels(LabelSequence(np.array([7]), 8))
        assert segs.segments == (Segment(7, 0, 1),)

    def test_round_trip_random(self, rng):
        labels = LabelSequence(rng.integers(0, 5, size=200), 5)
        back = labels_from_segments(segments_from_labels(labels))
        np.testing.assert_array_equal(back.labels, labels.labels)
        assert back.num_classes == labels.num_classes

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=80))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, raw):
        labels = LabelSequence(np.array(raw), 4)
        back = labels_from_segments(segments_from_labels(labels))
        np.testing.assert_array_equal(back.labels, labels.labels)

    def test_gap_rejected(self):
        with pytest.raises(DataError, match="gap"):
            SegmentList((Segment(0, 0, 2), Segment(1, 3, 4)))

    def test_overlap_rejected(self):
        with pytest.raises(DataError, match="gap or overlap"):
            SegmentList((Segment(0, 0, 3), Segment(1, 2, 4)))

    def test_non_maximal_rejected(self):
        with pytest.raises(DataError, match="maximal"):
            SegmentList((Segment(0, 0, 2), Segment(0, 2, 4)))


# ---------------------------------------------------------------------------
# chunking / downsampling


class TestChunking:
    def test_remainder_chunk(self):
        feats, labels = make_pair(np.zeros(430, dtype=int), num_classes=1)
        chunks = chunk_sequence(feats, labels, window_frames=50)
        assert len(chunks) == 9
        assert [c[0].num_frames for c in chunks] == [50] * 8 + [30]

    def test_full_percent_is_identity(self):
        feats, labels = make_pair([0, 1, 1, 2, 2])
        (cf, cl), = chunk_sequence(feats, labels, mode="video_specific", percent=1.0)
        np.testing.assert_array_equal(cf.frames, feats.frames)
        np.testing.assert_array_equal(cl.labels, labels.labels)

    def test_video_specific_quarters(self):
        feats, labels = make_pair(np.zeros(100, dtype=int), num_classes=1)
        chunks = chunk_sequence(feats, labels, mode="video_specific", percent=0.25)
        assert [c[0].num_frames for c in chunks] == [25, 25, 25, 25]

    def test_concatenation_reconstructs(self, rng):
        labels = rng.integers(0, 3, size=137)
        feats, lab = make_pair(labels)
        chunks = chunk_sequence(feats, lab, window_frames=16)
        np.testing.assert_array_equal(
            np.concatenate([c[0].frames for c in chunks]), feats.frames
        )
        np.testing.assert_array_equal(
            np.concatenate([c[1].labels for c in chunks]), lab.labels
        )

    def test_bad_window(self):
        feats, labels = make_pair([0, 1])
        with pytest.raises(ValueError):
            chunk_sequence(feats, labels, window_frames=0)


class TestDownsample:
    def test_identity_rate(self):
        feats, labels = make_pair([0, 1, 0])
        df, dl = downsample(feats, labels, 1)
        np.testing.assert_array_equal(df.frames, feats.frames)

    def test_rate_two(self):
        feats, labels = make_pair(np.arange(10) % 3)
        df, dl = downsample(feats, labels, 2)
        assert df.num_frames == 5
        np.testing.assert_array_equal(df.frames, feats.frames[[0, 2, 4, 6, 8]])
        np.testing.assert_array_equal(dl.labels, labels.labels[[0, 2, 4, 6, 8]])

    def test_composition(self, rng):
        labels = rng.integers(0, 3, size=64)
        feats, lab = make_pair(labels)
        once_f, once_l = downsample(*downsample(feats, lab, 2), 2)
        four_f, four_l = downsample(feats, lab, 4)
        np.testing.assert_array_equal(once_f.frames, four_f.frames)
        np.testing.assert_array_equal(once_l.labels, four_l.labels)

    def test_ceil_length(self):
        feats, labels = make_pair(np.zeros(7, dtype=int), num_classes=1)
        df, _ = downsample(feats, labels, 3)
        assert df.num_frames == 3  # frames 0, 3, 6

    def test_bad_rate(self):
        feats, labels = make_pair([0, 1])
        with pytest.raises(ValueError):
            downsample(feats, labels, 0)


# ---------------------------------------------------------------------------
# synthetic data


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(num_videos=4, frames_per_video=60, num_classes=3,
                         mean_segment_length=10, feature_dim=4)
        a = synth_generate(spec, seed=9)
        b = synth_generate(spec, seed=9)
        for (fa, la), (fb, lb) in zip(a.videos, b.videos):
            np.testing.assert_array_equal(fa.frames, fb.frames)
            np.testing.assert_array_equal(la.labels, lb.labels)

    def test_zero_noise_gives_constant_segments(self):
        spec = SynthSpec(num_videos=2, frames_per_video=40, num_classes=3,
                         mean_segment_length=8, feature_dim=4, noise_scale=0.0)
        data = synth_generate(spec, seed=3)
        for feats, labels in data.videos:
            for seg in segments_from_labels(labels).segments:
                block = feats.frames[seg.start : seg.end]
                assert (block == block[0]).all()

    @pytest.mark.parametrize("num_classes", [2, 3, 5])
    def test_long_range_rule_always_holds(self, num_classes):
        spec = SynthSpec(num_videos=25, frames_per_video=100, num_classes=num_classes,
                         mean_segment_length=15, feature_dim=4, long_range_flag=True)
        data = synth_generate(spec, seed=11)
        for _, labels in data.videos:
            segs = segments_from_labels(labels).segments
            assert segs[-1].class_id == (segs[0].class_id + 1) % num_classes

    def test_long_range_final_features_carry_no_class_signal(self):
        # final-segment frames come from one shared decoy prototype: their
        # mean must not vary with the label they carry
        spec = SynthSpec(num_videos=30, frames_per_video=80, num_classes=4,
                         mean_segment_length=12, feature_dim=6,
                         noise_scale=0.0, long_range_flag=True)
        data = synth_generate(spec, seed=5)
        finals = {}
        for feats, labels in data.videos:
            seg = segments_from_labels(labels).segments[-1]
            finals.setdefault(seg.class_id, feats.frames[seg.start])
        vectors = list(finals.values())
        assert len(vectors) > 1
        for vec in vectors[1:]:
            np.testing.assert_array_equal(vec, vectors[0])

    def test_long_range_needs_two_classes(self):
        with pytest.raises(ValueError):
            SynthSpec(num_classes=1, long_range_flag=True)

    def test_labels_tile_and_alternate(self):
        spec = SynthSpec(num_videos=6, frames_per_video=90, num_classes=4,
                         mean_segment_length=9, feature_dim=3, long_range_flag=True)
        data = synth_generate(spec, seed=2)
        for feats, labels in data.videos:
            assert feats.num_frames == 90 and len(labels) == 90
            segments_from_labels(labels)  # validates maximal runs


# ---------------------------------------------------------------------------
# manifests


class TestManifest:
    def test_write_load_round_trip(self, tmp_path, rng):
        spec = SynthSpec(num_videos=3, frames_per_video=30, num_classes=3,
                         mean_segment_length=6, feature_dim=4)
        data = synth_generate(spec, seed=0)
        manifest_path = write_dataset(data, tmp_path)
        manifest = load_manifest(manifest_path, tmp_path / "mapping.txt")
        assert manifest.num_classes == 3
        loaded = load_dataset(manifest)
        for (fa, la), (fb, lb) in zip(data.videos, loaded.videos):
            np.testing.assert_array_equal(fa.frames, fb.frames)
            np.testing.assert_array_equal(la.labels, lb.labels)

    def test_split_manifests(self, tmp_path):
        spec = SynthSpec(num_videos=5, frames_per_video=20, num_classes=2,
                         mean_segment_length=5, feature_dim=2)
        data = synth_generate(spec, seed=0)
        write_dataset(data, tmp_path, split=3)
        train = load_manifest(tmp_path / "manifest_train.txt", tmp_path / "mapping.txt")
        test = load_manifest(tmp_path / "manifest_test.txt", tmp_path / "mapping.txt")
        assert len(train.entries) == 3 and len(test.entries) == 2

    def test_sparse_ids_rejected(self):
        with pytest.raises(DataError, match="dense"):
            DatasetManifest(entries=(), class_to_id={"a": 0, "b": 2})

    def test_duplicate_paths_rejected(self, tmp_path):
        entry = ManifestEntry("v", tmp_path / "x.ltf", tmp_path / "x.ltf")
        with pytest.raises(DataError, match="distinct"):
            DatasetManifest(entries=(entry,), class_to_id={"a": 0})

    def test_length_mismatch_is_load_error(self, tmp_path):
        save_features(tmp_path / "v.ltf", FeatureSequence(np.ones((4, 2))))
        (tmp_path / "v.txt").write_text("a\na\n")
        (tmp_path / "map.txt").write_text("0 a\n")
        (tmp_path / "man.txt").write_text("v v.ltf v.txt\n")
        manifest = load_manifest(tmp_path / "man.txt", tmp_path / "map.txt")
        with pytest.raises(DataError, match="labels"):
            load_dataset(manifest)
