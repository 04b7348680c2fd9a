"""Prediction pipeline: buffering, proposals, classification and suppression."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .geometry import AnchorGrid, TemporalSegment, decode, generate_anchors
from .loss import softmax
from .model import Detector

FORWARD = "forward"
REVERSE = "reverse"


@dataclass(frozen=True)
class ScoredSegment:
    segment: TemporalSegment
    score: float


@dataclass(frozen=True)
class ScoredDetection:
    segment: TemporalSegment
    class_id: int
    score: float


# -- non-maximum suppression ----------------------------------------------------

def nms_arrays(segments: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy NMS on ``(N, 2)`` segments; returns kept indices in descending score order.

    A candidate is discarded when its IoU with an already kept one is strictly
    greater than ``threshold``. Equal scores keep the earlier index first.
    """
    if not 0 <= threshold <= 1:
        raise ValueError(f"NMS threshold must be in [0, 1], got {threshold}")
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    starts, ends = segments[:, 0], segments[:, 1]
    lengths = ends - starts
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        inter = np.maximum(0.0, np.minimum(ends[i], ends[rest]) - np.maximum(starts[i], starts[rest]))
        union = lengths[i] + lengths[rest] - inter
        iou = np.zeros_like(union)
        np.divide(inter, union, out=iou, where=union > 0)
        order = rest[iou <= threshold]
    return np.array(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredSegment], threshold: float) -> list[int]:
    if not candidates:
        return []
    segs = np.array([[c.segment.start, c.segment.end] for c in candidates])
    scores = np.array([c.score for c in candidates])
    return nms_arrays(segs, scores, threshold).tolist()


# -- buffering -------------------------------------------------------------------

@dataclass(frozen=True)
class BufferWindow:
    """One buffer cut from the video.

    ``offset`` counts frames from the start of the pass: for a reverse window
    it is measured on the time-reversed video. ``valid`` is the number of real
    frames; the rest of the buffer repeats the last real frame.
    """

    offset: int
    direction: str
    valid: int


@dataclass
class BufferPlan:
    video_length: int
    buffer_length: int
    windows: list[BufferWindow]

    @property
    def padding(self) -> int:
        return self.buffer_length - self.windows[-1].valid if self.windows else 0

    def covered_frames(self) -> set[int]:
        seen = set()
        for win in self.windows:
            for t in range(win.valid):
                f = win.offset + t
                seen.add(f if win.direction == FORWARD else self.video_length - 1 - f)
        return seen


def build_buffers(video_length: int, buffer_length: int = 768, mode: str = "one-way", stride: int = 8) -> BufferPlan:
    """Tile a video into non-overlapping buffers, forward and optionally reversed."""
    if video_length <= 0:
        raise ValueError("video has no frames")
    if buffer_length <= 0 or buffer_length % stride:
        raise ValueError(f"buffer length {buffer_length} must be a positive multiple of {stride}")
    if mode not in ("one-way", "two-way"):
        raise ValueError(f"unknown buffer mode {mode!r}")
    n = math.ceil(video_length / buffer_length)
    offsets = [i * buffer_length for i in range(n)]
    windows = [BufferWindow(o, FORWARD, min(buffer_length, video_length - o)) for o in offsets]
    if mode == "two-way":
        windows += [BufferWindow(o, REVERSE, min(buffer_length, video_length - o)) for o in offsets]
    return BufferPlan(video_length, buffer_length, windows)


def extract_buffer(video: np.ndarray, window: BufferWindow, buffer_length: int) -> np.ndarray:
    """Cut ``window`` out of a ``(C, L, h, w)`` video, padding with the last real frame."""
    if window.direction == REVERSE:
        video = video[:, ::-1]
    chunk = video[:, window.offset:window.offset + window.valid]
    if window.valid < buffer_length:
        tail = np.repeat(chunk[:, -1:], buffer_length - window.valid, axis=1)
        chunk = np.concatenate([chunk, tail], axis=1)
    return np.ascontiguousarray(chunk)


def segments_to_buffer(segments: np.ndarray, window: BufferWindow, video_length: int) -> np.ndarray:
    """Map video-frame segments into the buffer's frame coordinates (unclipped)."""
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    if window.direction == REVERSE:
        segments = video_length - segments[:, ::-1]
    return segments - window.offset


def segments_from_buffer(segments: np.ndarray, window: BufferWindow, video_length: int) -> np.ndarray:
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2) + window.offset
    if window.direction == REVERSE:
        segments = video_length - segments[:, ::-1]
    return segments


# -- detection -------------------------------------------------------------------

@dataclass
class DetectConfig:
    proposal_nms: float = 0.7
    eval_iou: float = 0.5
    score_floor: float = 0.05
    max_proposals: int = 300

    @property
    def final_nms(self) -> float:
        return max(self.eval_iou - 0.1, 0.0)


@dataclass
class BufferOutput:
    """Everything one buffer produced, in buffer frame coordinates."""

    num_anchors: int
    proposals: np.ndarray  # (P, 2) after NMS and top-k
    proposal_scores: np.ndarray  # (P,)
    detections: list[ScoredDetection] = field(default_factory=list)


def proposals_from_head(
    anchors: AnchorGrid,
    logits: np.ndarray,
    offsets: np.ndarray,
    buffer_length: int,
    nms_threshold: float,
    max_proposals: int,
    offset_std=(1.0, 1.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, suppress and truncate the proposal head's predictions."""
    scores = softmax(logits)[:, 1]
    segs = decode(anchors.anchors, _unscale(offsets, offset_std))
    segs = np.clip(segs, 0.0, float(buffer_length))
    ok = (segs[:, 1] - segs[:, 0]) > 0
    idx = np.flatnonzero(ok)
    keep = nms_arrays(segs[idx], scores[idx], nms_threshold)[:max_proposals]
    return segs[idx[keep]], scores[idx[keep]]


def _unscale(offsets: np.ndarray, offset_std) -> np.ndarray:
    return np.clip(offsets.astype(np.float64) * np.asarray(offset_std), -10.0, 10.0)


def anchors_for(model: Detector, buffer_length: int) -> AnchorGrid:
    return generate_anchors(buffer_length // model.config.stride, model.config.anchor_scales, model.config.stride)


def detect_buffer(model: Detector, buffer: np.ndarray, config: DetectConfig = DetectConfig()) -> BufferOutput:
    """Run both stages on one ``(C_in, L, h, w)`` buffer."""
    length = buffer.shape[1]
    anchors = anchors_for(model, length)
    with ag.no_grad():
        feats = model.backbone_forward(buffer)
        logits, offsets = model.proposal_forward(feats)
        props, pscores = proposals_from_head(
            anchors, logits.data, offsets.data, length, config.proposal_nms, config.max_proposals,
            model.config.offset_std,
        )
        out = BufferOutput(len(anchors), props, pscores)
        if props.shape[0] == 0:
            return out
        cls_logits, cls_offsets = model.classifier_forward(model.pool(feats, props))
    probs = softmax(cls_logits.data)
    deltas = _unscale(cls_offsets.data, model.config.offset_std)
    # each proposal becomes at most one detection, of its most probable class
    pred = probs.argmax(axis=1)
    score = probs[np.arange(pred.size), pred]
    fg = (pred > 0) & (score >= config.score_floor)
    segs = np.clip(decode(props[fg], deltas[fg, pred[fg]]), 0.0, float(length))
    classes, scores = pred[fg], score[fg]
    ok = (segs[:, 1] - segs[:, 0]) > 0
    segs, classes, scores = segs[ok], classes[ok], scores[ok]
    for c in np.unique(classes):
        sel = np.flatnonzero(classes == c)
        for k in nms_arrays(segs[sel], scores[sel], config.final_nms):
            i = sel[k]
            out.detections.append(ScoredDetection(TemporalSegment(*map(float, segs[i])), int(c), float(scores[i])))
    return out


def detect(model: Detector, video: np.ndarray, config: DetectConfig = DetectConfig(), buffer_length: int = 768) -> list[ScoredDetection]:
    """Detect activities over a whole ``(C_in, L, h, w)`` video.

    The video is tiled into forward buffers; detections lying entirely in
    padded frames are dropped and the rest are clipped to the video extent.
    """
    n = video.shape[1]
    plan = build_buffers(n, buffer_length, "one-way", model.config.stride)
    found = []
    for win in plan.windows:
        res = detect_buffer(model, extract_buffer(video, win, buffer_length), config)
        for d in res.detections:
            if d.segment.start >= win.valid:
                continue
            seg = segments_from_buffer(np.array([[d.segment.start, d.segment.end]]), win, n)[0]
            seg = np.clip(seg, 0.0, float(n))
            if seg[1] <= seg[0]:
                continue
            found.append(ScoredDetection(TemporalSegment(*map(float, seg)), d.class_id, d.score))
    found.sort(key=lambda d: -d.score)
    return found


def video_proposals(model: Detector, video: np.ndarray, config: DetectConfig = DetectConfig(), buffer_length: int = 768) -> tuple[np.ndarray, np.ndarray]:
    """Stage-one proposals over a whole video, in video frames."""
    n = video.shape[1]
    plan = build_buffers(n, buffer_length, "one-way", model.config.stride)
    segs, scores = [], []
    anchors = anchors_for(model, buffer_length)
    for win in plan.windows:
        buf = extract_buffer(video, win, buffer_length)
        with ag.no_grad():
            feats = model.backbone_forward(buf)
            logits, offsets = model.proposal_forward(feats)
        p, s = proposals_from_head(
            anchors, logits.data, offsets.data, buffer_length, config.proposal_nms, config.max_proposals,
            model.config.offset_std,
        )
        keep = p[:, 0] < win.valid
        p = np.clip(segments_from_buffer(p[keep], win, n), 0.0, float(n))
        segs.append(p)
        scores.append(s[keep])
    return np.concatenate(segs), np.concatenate(scores)


# -- detection file format ---------------------------------------------------------

def write_detections(path, rows: Iterable[tuple[str, ScoredDetection]], fps: dict[str, float]) -> None:
    """Tab-separated ``video_id class_id start_s end_s score`` lines."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for vid, d in rows:
            f = fps[vid]
            w.writerow([vid, d.class_id, f"{d.segment.start / f:.6f}", f"{d.segment.end / f:.6f}", f"{d.score:.6f}"])


def read_detections(path) -> list[tuple[str, int, float, float, float]]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(row)}")
            vid, cls, start, end, score = row
            out.append((vid, int(cls), float(start), float(end), float(score)))
    return out


def detect_to_file(model: Detector, videos, out_path: Path, config: DetectConfig, buffer_length: int) -> int:
    """Run :func:`detect` over ``(record, features)`` pairs and write the results."""
    rows, fps = [], {}
    for rec, feats in videos:
        fps[rec.id] = rec.fps
        rows.extend((rec.id, d) for d in detect(model, feats, config, buffer_length))
    write_detections(out_path, rows, fps)
    return len(rows)
