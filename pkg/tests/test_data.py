import json

import numpy as np
import pytest

from tadet.data import (
    AnnotationError,
    SynthConfig,
    VideoRecord,
    class_patterns,
    generate_synthetic,
    load_annotations,
    load_dataset,
    read_features,
    synth_video,
    write_annotations,
    write_features,
)
from tadet.geometry import iou_matrix


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def matched_filter_segments(video, num_classes, channels, pattern_seed=0):
    """Recover ``(class, start, end)`` runs from a noise-free video by projecting every frame on each class signature."""
    sig, _ = class_patterns(num_classes, channels, pattern_seed)
    x = video.mean(axis=(2, 3))  # (channels, L)
    coef = sig @ x / (sig**2).sum(axis=1, keepdims=True)  # (C, L)
    resid = np.stack([np.abs(x - coef[c][None] * sig[c][:, None]).max(axis=0) for c in range(num_classes)])
    fits = (resid < 1e-4) & (coef > 1e-3)
    found = []
    for c in range(num_classes):
        t, n = 0, fits.shape[1]
        while t < n:
            if fits[c, t]:
                s = t
                while t < n and fits[c, t]:
                    t += 1
                found.append((c + 1, s, t))
            t += 1
    return found


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).standard_normal((3, 5, 2, 2)).astype(np.float32)
        write_features(tmp_path / "x.tdfv", a)
        raw = (tmp_path / "x.tdfv").read_bytes()
        assert raw[:4] == b"TDFV"
        np.testing.assert_array_equal(read_features(tmp_path / "x.tdfv"), a)

    def test_truncated(self, tmp_path):
        write_features(tmp_path / "x.tdfv", np.zeros((2, 3)))
        p = tmp_path / "x.tdfv"
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(ValueError):
            read_features(p)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        recs = [
            VideoRecord("a", 25.0, 100, "features/a.tdfv", [(1, 0.5, 1.25), (3, 2.0, 4.0)]),
            VideoRecord("b", 10.0, 30, "features/b.tdfv", []),
        ]
        write_annotations(tmp_path / "x.jsonl", recs)
        assert load_annotations(tmp_path / "x.jsonl") == recs

    @pytest.mark.parametrize(
        "obj,needle",
        [
            ({"id": "a", "fps": 25, "num_frames": 100, "features": "f", "annotations": [[1, 2.0, 1.0]]}, "start < end"),
            ({"id": "a", "fps": 25, "num_frames": 100, "features": "f", "annotations": [[1, 0.0, 9.0]]}, "beyond"),
            ({"id": "a", "fps": 25, "num_frames": 100, "features": "f"}, "annotations"),
            ({"id": "a", "fps": "x", "num_frames": 100, "features": "f", "annotations": []}, "fps"),
            ({"id": "a", "fps": 25, "num_frames": 100, "features": "f", "annotations": [[0, 0.0, 1.0]]}, "class id"),
        ],
    )
    def test_rejected_with_line_number(self, tmp_path, obj, needle):
        good = {"id": "ok", "fps": 25, "num_frames": 10, "features": "f", "annotations": []}
        p = tmp_path / "x.jsonl"
        p.write_text(json.dumps(good) + "\n" + json.dumps(obj) + "\n")
        with pytest.raises(AnnotationError, match=f"x.jsonl:2: .*{needle}"):
            load_annotations(p)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(AnnotationError, match=":1:"):
            load_annotations(p)

    def test_class_bound(self, tmp_path):
        write_annotations(tmp_path / "x.jsonl", [VideoRecord("a", 25.0, 100, "f", [(6, 0.0, 1.0)])])
        with pytest.raises(AnnotationError):
            load_annotations(tmp_path / "x.jsonl", num_classes=5)


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(num_videos=3, rng_seed=7)
        generate_synthetic(cfg, tmp_path / "a", "train")
        generate_synthetic(cfg, tmp_path / "b", "train")
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and len(a) == 4

    def test_seed_changes_data(self):
        a, _ = synth_video(SynthConfig(rng_seed=1), 0)
        b, _ = synth_video(SynthConfig(rng_seed=2), 0)
        assert a.shape != b.shape or not np.array_equal(a, b)

    def test_annotations_within_extent(self, tmp_path):
        cfg = SynthConfig(num_videos=20, rng_seed=3)
        for rec, feats in load_dataset(generate_synthetic(cfg, tmp_path, "x")):
            assert feats.shape == (cfg.channels, rec.num_frames, *cfg.spatial_dims)
            for c, s, e in rec.annotations:
                assert 1 <= c <= cfg.num_classes
                assert 0 <= s < e <= rec.duration

    def test_matched_filter_recovers_noise_free(self):
        cfg = SynthConfig(num_classes=5, snr=float("inf"), allow_overlap=False, rng_seed=11)
        checked = 0
        for i in range(15):
            video, planted = synth_video(cfg, i)
            found = matched_filter_segments(video, cfg.num_classes, cfg.channels)
            truth = np.array([[s, s + d] for _, s, d in planted], dtype=float)
            est = np.array([[s, e] for _, s, e in found], dtype=float).reshape(-1, 2)
            iou = iou_matrix(truth, est)
            for k, (c, _, _) in enumerate(planted):
                j = int(iou[k].argmax())
                assert iou[k, j] > 0.9
                assert found[j][0] == c
                checked += 1
        assert checked >= 15

    def test_duration_histogram_spans_anchor_range(self):
        cfg = SynthConfig(num_classes=20, num_videos=300, rng_seed=5)
        durations = []
        for i in range(cfg.num_videos):
            _, planted = synth_video(cfg, i)
            durations += [d / cfg.fps for _, _, d in planted]
        durations = np.array(durations)
        assert durations.min() >= 0.64 - 1e-9 and durations.max() <= 5.12 + 1e-9
        counts, _ = np.histogram(durations, bins=np.linspace(0.64, 5.12, 8))
        assert (counts > 0).all()

    @pytest.mark.parametrize(
        "kw",
        [dict(snr=0.0), dict(duration=(2.0, 1.0)), dict(video_length=(100, 50)), dict(video_length=(50, 60))],
    )
    def test_invalid_config(self, tmp_path, kw):
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(**kw), tmp_path)
