"""Feature-video files, annotation files and the synthetic dataset generator.

Annotation files are JSON lines, one video per line::

    {"id": "train_00000", "fps": 25.0, "num_frames": 700,
     "features": "features/train_00000.tdfv",
     "annotations": [[3, 4.2, 6.08], ...]}

Annotation times are seconds. ``features`` is resolved relative to the
annotation file's directory.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"TDFV"
FEATURE_VERSION = 1


class AnnotationError(ValueError):
    pass


@dataclass
class VideoRecord:
    id: str
    fps: float
    num_frames: int
    features: str
    annotations: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def segments_frames(self) -> np.ndarray:
        """Ground-truth segments converted to frames, ``(G, 2)``."""
        return np.array([[s * self.fps, e * self.fps] for _, s, e in self.annotations], dtype=np.float64).reshape(-1, 2)

    def classes(self) -> np.ndarray:
        return np.array([c for c, _, _ in self.annotations], dtype=np.int64)

    def validate(self, num_classes: int | None = None) -> None:
        if self.fps <= 0 or self.num_frames <= 0:
            raise AnnotationError(f"{self.id}: fps and num_frames must be positive")
        for c, s, e in self.annotations:
            if not 0 <= s < e:
                raise AnnotationError(f"{self.id}: segment [{s}, {e}] must satisfy 0 <= start < end")
            if e > self.duration + 1e-9:
                raise AnnotationError(f"{self.id}: segment end {e}s beyond video duration {self.duration}s")
            if c < 1 or (num_classes is not None and c > num_classes):
                raise AnnotationError(f"{self.id}: class id {c} outside 1..{num_classes or 'C'}")


# -- feature-video files ---------------------------------------------------------

def write_features(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature-video file")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    off = 12 + 8 * rank
    size = int(np.prod(dims))
    if len(buf) - off != 4 * size:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


# -- annotation files --------------------------------------------------------------

_FIELDS = ("id", "fps", "num_frames", "features", "annotations")


def write_annotations(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            d = asdict(r)
            d["annotations"] = [list(a) for a in r.annotations]
            fh.write(json.dumps(d) + "\n")


def _parse_record(obj, where: str) -> VideoRecord:
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: expected a JSON object")
    for k in _FIELDS:
        if k not in obj:
            raise AnnotationError(f"{where}: missing field '{k}'")
    try:
        anns = []
        for a in obj["annotations"]:
            c, s, e = a
            anns.append((int(c), float(s), float(e)))
    except (TypeError, ValueError):
        raise AnnotationError(f"{where}: field 'annotations' must be a list of [class_id, start_s, end_s]") from None
    for k, typ in (("fps", float), ("num_frames", int)):
        if not isinstance(obj[k], (int, float)) or isinstance(obj[k], bool):
            raise AnnotationError(f"{where}: field '{k}' must be a number")
    if not isinstance(obj["id"], str) or not isinstance(obj["features"], str):
        raise AnnotationError(f"{where}: fields 'id' and 'features' must be strings")
    return VideoRecord(obj["id"], float(obj["fps"]), int(obj["num_frames"]), obj["features"], anns)


def load_annotations(path, num_classes: int | None = None) -> list[VideoRecord]:
    """Parse and validate an annotation file; errors name the line."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{where}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, where)
            try:
                rec.validate(num_classes)
            except AnnotationError as exc:
                raise AnnotationError(f"{where}: {exc}") from None
            records.append(rec)
    return records


def load_dataset(path, num_classes: int | None = None) -> list[tuple[VideoRecord, np.ndarray]]:
    path = Path(path)
    return [(r, read_features(path.parent / r.features)) for r in load_annotations(path, num_classes)]


# -- synthetic data ----------------------------------------------------------------

@dataclass
class SynthConfig:
    num_classes: int = 5
    num_videos: int = 10
    video_length: tuple[int, int] = (512, 768)  # frames, inclusive
    activities_per_video: tuple[int, int] = (1, 3)
    duration: tuple[float, float] = (0.64, 5.12)  # seconds
    fps: float = 25.0
    snr: float = 3.0
    channels: int = 8
    spatial_dims: tuple[int, int] = (2, 2)
    rng_seed: int = 0
    pattern_seed: int = 0
    allow_overlap: bool = True

    def validate(self) -> None:
        lo, hi = self.video_length
        if not 1 <= lo <= hi:
            raise ValueError("video_length range must satisfy 1 <= lo <= hi")
        if not 0 <= self.activities_per_video[0] <= self.activities_per_video[1]:
            raise ValueError("activities_per_video range is inverted")
        dlo, dhi = self.duration
        if not 0 < dlo <= dhi:
            raise ValueError("duration range must satisfy 0 < lo <= hi")
        if math.ceil(dhi * self.fps) > lo:
            raise ValueError("longest activity does not fit in the shortest video")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.num_classes < 1 or self.channels < 1 or self.num_videos < 0 or self.fps <= 0:
            raise ValueError("num_classes, channels and fps must be positive")


def class_patterns(num_classes: int, channels: int, pattern_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class channel signature ``(C, channels)`` with unit RMS, and modulation frequencies (cycles/frame).

    Signatures depend only on ``pattern_seed`` so separately seeded splits
    share the same classes.
    """
    rng = np.random.default_rng([pattern_seed, num_classes, channels])
    v = rng.standard_normal((num_classes, channels))
    v /= np.sqrt((v**2).mean(axis=1, keepdims=True))
    freqs = np.arange(1, num_classes + 1) / 48.0
    return v, freqs


def pattern_waveform(class_index: int, length: int, freqs: np.ndarray) -> np.ndarray:
    """Temporal envelope of a planted activity: strictly positive, class-specific frequency."""
    tau = np.arange(length)
    return 0.6 + 0.4 * np.cos(2 * np.pi * freqs[class_index] * tau)


def synth_video(config: SynthConfig, index: int) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """One video ``(channels, L, h, w)`` and its planted ``(class_id, start_frame, n_frames)``."""
    rng = np.random.default_rng([config.rng_seed, index])
    v, freqs = class_patterns(config.num_classes, config.channels, config.pattern_seed)
    length = int(rng.integers(config.video_length[0], config.video_length[1] + 1))
    h, w = config.spatial_dims
    if math.isinf(config.snr):
        noise_std, amp = 0.0, 1.0
    else:
        noise_std, amp = 1.0, float(config.snr)
    video = noise_std * rng.standard_normal((config.channels, length, h, w))

    n_act = int(rng.integers(config.activities_per_video[0], config.activities_per_video[1] + 1))
    dmin = max(1, round(config.duration[0] * config.fps))
    dmax = max(dmin, round(config.duration[1] * config.fps))
    planted: list[tuple[int, int, int]] = []
    for _ in range(n_act):
        for _attempt in range(100):
            d = int(rng.integers(dmin, dmax + 1))
            s = int(rng.integers(0, length - d + 1))
            c = int(rng.integers(1, config.num_classes + 1))
            if config.allow_overlap or all(s + d <= ps or ps + pd <= s for _, ps, pd in planted):
                break
        else:
            continue
        wave = pattern_waveform(c - 1, d, freqs)
        video[:, s:s + d] += amp * v[c - 1][:, None, None, None] * wave[None, :, None, None]
        planted.append((c, s, d))
    planted.sort(key=lambda p: (p[1], p[2], p[0]))
    return video.astype(np.float32), planted


def generate_synthetic(config: SynthConfig, out_dir, split: str = "train") -> Path:
    """Write ``<split>.jsonl`` and one feature file per video under ``out_dir``."""
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(config.num_videos):
        video, planted = synth_video(config, i)
        vid = f"{split}_{i:05d}"
        rel = f"features/{vid}.tdfv"
        write_features(out_dir / rel, video)
        anns = [(c, s / config.fps, (s + d) / config.fps) for c, s, d in planted]
        records.append(VideoRecord(vid, config.fps, video.shape[1], rel, anns))
    path = out_dir / f"{split}.jsonl"
    write_annotations(path, records)
    return path
