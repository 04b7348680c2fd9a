"""IoU-driven label assignment and balanced minibatch sampling.

Label convention for both stages: ``-1`` ignored, ``0`` background, ``>= 1``
foreground class id. The proposal stage only ever uses class ``1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import OffsetPair, encode, iou_matrix

logger = logging.getLogger(__name__)

IGNORE = -1
BACKGROUND = 0


@dataclass
class AssignmentTable:
    labels: np.ndarray  # (N,) int
    matched_gt: np.ndarray  # (N,) int, -1 when unmatched
    targets: np.ndarray  # (N, 2) float64, zero rows for non-positives

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == BACKGROUND

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    def regression_target(self, i: int) -> OffsetPair | None:
        if self.labels[i] <= 0:
            return None
        return OffsetPair(*map(float, self.targets[i]))

    def matched(self, i: int) -> int | None:
        return None if self.matched_gt[i] < 0 else int(self.matched_gt[i])


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int
    positive_fraction: float
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie strictly between 0 and 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


def _as_segments(x) -> np.ndarray:
    if hasattr(x, "anchors"):
        x = x.anchors
    return np.asarray(x, dtype=np.float64).reshape(-1, 2)


def _build_table(segments: np.ndarray, gts: np.ndarray, labels: np.ndarray, matched: np.ndarray) -> AssignmentTable:
    targets = np.zeros((segments.shape[0], 2), dtype=np.float64)
    pos = labels > 0
    if pos.any():
        targets[pos] = encode(segments[pos], gts[matched[pos]])
    matched = np.where(labels > 0, matched, -1)
    return AssignmentTable(labels, matched, targets)


def assign_proposal_labels(anchors, gts, hi: float = 0.7, lo: float = 0.3) -> AssignmentTable:
    """Label anchors as activity / background / ignored.

    An anchor is positive if its IoU with some ground truth exceeds ``hi``
    or if it attains the highest IoU any anchor has with some ground truth.
    It is negative when its IoU is below ``lo`` for every ground truth, and
    ignored otherwise. Ground-truth ties for an anchor go to the lowest index.
    """
    anchors = _as_segments(anchors)
    gts = _as_segments(gts)
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("anchor list is empty")
    if not 0 < lo <= hi < 1:
        raise ValueError(f"thresholds must satisfy 0 < lo <= hi < 1, got lo={lo} hi={hi}")

    labels = np.full(n, IGNORE, dtype=np.int64)
    if gts.shape[0] == 0:
        labels[:] = BACKGROUND
        return AssignmentTable(labels, np.full(n, -1, dtype=np.int64), np.zeros((n, 2)))

    ious = iou_matrix(anchors, gts)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]

    labels[best < lo] = BACKGROUND
    labels[best > hi] = 1

    gt_best = ious.max(axis=0)
    for g in np.flatnonzero(gt_best <= 0):
        logger.warning("ground truth %s overlaps no anchor; it gets no positive", gts[g].tolist())
    fallback = ((ious == gt_best[None, :]) & (gt_best[None, :] > 0)).any(axis=1)
    labels[fallback] = 1
    return _build_table(anchors, gts, labels, matched)


def assign_class_labels(proposals, gts, gt_classes, thresh: float = 0.5) -> AssignmentTable:
    """Give each proposal the class of its best-overlapping ground truth if IoU > ``thresh``."""
    proposals = _as_segments(proposals)
    gts = _as_segments(gts)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = proposals.shape[0]
    if n == 0:
        raise ValueError("proposal list is empty")
    if gt_classes.shape[0] != gts.shape[0]:
        raise ValueError("need one class id per ground-truth segment")
    labels = np.zeros(n, dtype=np.int64)
    if gts.shape[0] == 0:
        return AssignmentTable(labels, np.full(n, -1, dtype=np.int64), np.zeros((n, 2)))

    ious = iou_matrix(proposals, gts)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    fg = best > thresh
    labels[fg] = gt_classes[matched[fg]]
    return _build_table(proposals, gts, labels, matched)


def sample_minibatch(table: AssignmentTable, config: SamplerConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw a balanced subset of non-ignored entries.

    Positives are capped at ``floor(positive_fraction * batch_size)``; any
    shortfall is filled with extra negatives. Returns sorted indices.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    pos = np.flatnonzero(table.labels > 0)
    neg = np.flatnonzero(table.labels == BACKGROUND)
    if pos.size + neg.size == 0:
        raise ValueError("every entry is ignored; nothing to sample")

    quota = int(np.floor(config.positive_fraction * config.batch_size))
    if pos.size > quota:
        pos = rng.choice(pos, size=quota, replace=False)
    n_neg = config.batch_size - pos.size
    if neg.size > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(np.concatenate([pos, neg]))
