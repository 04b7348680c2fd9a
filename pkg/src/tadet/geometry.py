"""Temporal interval arithmetic.

Segments are stored as ``(start, end)`` in input-frame units. The
``(center, length)`` view is derived and is what the offset parameterization
operates on. The array helpers work on ``(N, 2)`` arrays of start/end rows and
are what the rest of the package uses in hot paths; the scalar helpers wrap
them for single segments.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np


class NonFiniteOffsetError(ValueError):
    """Offsets containing NaN or infinity were passed to a decoder."""


class DegenerateSegmentError(ValueError):
    """Raised when an operation needs a segment of strictly positive length."""


@dataclass(frozen=True)
class TemporalSegment:
    start: float
    end: float

    def __post_init__(self):
        if not (self.start <= self.end):
            raise ValueError(f"segment start {self.start} exceeds end {self.end}")

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return self.end - self.start

    @classmethod
    def from_center(cls, center: float, length: float) -> TemporalSegment:
        half = 0.5 * length
        return cls(center - half, center + half)

    def as_array(self) -> np.ndarray:
        return np.array([self.start, self.end], dtype=np.float64)


@dataclass(frozen=True)
class OffsetPair:
    delta_center: float
    delta_log_length: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_center, self.delta_log_length], dtype=np.float64)


@dataclass(frozen=True)
class AnchorGrid:
    """Multi-scale reference segments repeated at every feature location.

    ``anchors`` has shape ``(num_locations * K, 2)`` and is ordered
    location-major: row ``j * K + k`` is scale ``k`` at location ``j``.
    """

    stride: int
    scales: tuple[int, ...]
    num_locations: int
    anchors: np.ndarray

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def segment(self, index: int) -> TemporalSegment:
        return TemporalSegment(*map(float, self.anchors[index]))


def to_center_length(segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    segments = np.asarray(segments, dtype=np.float64)
    return 0.5 * (segments[..., 0] + segments[..., 1]), segments[..., 1] - segments[..., 0]


def from_center_length(center: np.ndarray, length: np.ndarray) -> np.ndarray:
    half = 0.5 * np.asarray(length, dtype=np.float64)
    return np.stack([center - half, center + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise temporal IoU between ``(N, 2)`` and ``(M, 2)`` segment arrays.

    Pairs whose union has zero length get IoU 0.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.maximum(inter, 0.0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def segment_iou(a: TemporalSegment, b: TemporalSegment) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0:
        return 0.0
    return inter / union


def encode(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise ``(delta_center, delta_log_length)`` of ``gts`` w.r.t. ``anchors``."""
    ac, al = to_center_length(anchors)
    gc, gl = to_center_length(gts)
    if np.any(al <= 0) or np.any(gl <= 0):
        raise DegenerateSegmentError("offsets need anchors and targets of positive length")
    return np.stack([(gc - ac) / al, np.log(gl / al)], axis=-1)


def decode(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode`: apply offsets to reference segments."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if not np.all(np.isfinite(offsets)):
        raise NonFiniteOffsetError("offsets must be finite")
    ac, al = to_center_length(anchors)
    if np.any(al <= 0):
        raise DegenerateSegmentError("reference segments must have positive length")
    center = ac + offsets[..., 0] * al
    length = al * np.exp(offsets[..., 1])
    return from_center_length(center, length)


def encode_offsets(anchor: TemporalSegment, gt: TemporalSegment) -> OffsetPair:
    if anchor.length <= 0 or gt.length <= 0:
        raise DegenerateSegmentError(f"cannot encode {gt} against {anchor}")
    return OffsetPair((gt.center - anchor.center) / anchor.length, math.log(gt.length / anchor.length))


def decode_offsets(anchor: TemporalSegment, offsets: OffsetPair) -> TemporalSegment:
    if not (math.isfinite(offsets.delta_center) and math.isfinite(offsets.delta_log_length)):
        raise NonFiniteOffsetError(f"non-finite offsets {offsets}")
    if anchor.length <= 0:
        raise DegenerateSegmentError(f"cannot decode against {anchor}")
    center = anchor.center + offsets.delta_center * anchor.length
    return TemporalSegment.from_center(center, anchor.length * math.exp(offsets.delta_log_length))


def generate_anchors(num_locations: int, scales: Sequence[int], stride: int = 8) -> AnchorGrid:
    """Build the anchor lattice.

    Anchor ``(j, k)`` is centered at ``(j + 0.5) * stride`` with length
    ``scales[k] * stride``. Anchors are not clipped to the buffer.
    """
    scales = tuple(int(s) for s in scales)
    if not scales:
        raise ValueError("at least one anchor scale is required")
    if num_locations < 1 or stride < 1 or min(scales) < 1:
        raise ValueError("num_locations, stride and every scale must be >= 1")
    centers = (np.arange(num_locations, dtype=np.float64) + 0.5) * stride
    lengths = np.asarray(scales, dtype=np.float64) * stride
    c = np.repeat(centers, len(scales))
    l = np.tile(lengths, num_locations)
    return AnchorGrid(stride, scales, num_locations, from_center_length(c, l))


def clip_segments(segments: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.asarray(segments, dtype=np.float64), lo, hi)
