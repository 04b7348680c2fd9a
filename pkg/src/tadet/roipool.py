"""3D region-of-interest max pooling over ``C x l x h x w`` feature volumes.

A proposal given in input frames is mapped onto the temporal axis of the
feature volume (``floor(start / stride)`` .. ``ceil(end / stride)``, clipped),
and the resulting ``l_p x h x w`` window is partitioned into a fixed grid of
bins. Every output cell is the max over its bin; the argmax is recorded as a
flat ``(t, y, x)`` index so the backward pass is a scatter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SENTINEL = -1


class EmptyRegionError(ValueError):
    """The proposal does not intersect the feature volume."""


@dataclass
class FeatureVolume:
    data: np.ndarray  # (C, l, h, w)
    temporal_stride: int = 8

    def __post_init__(self):
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"feature volume must be 4-D with non-empty axes, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PoolGrid:
    ls: int = 1
    hs: int = 4
    ws: int = 4

    def __post_init__(self):
        if min(self.ls, self.hs, self.ws) < 1:
            raise ValueError("pool grid subdivisions must be >= 1")

    @property
    def cells(self) -> int:
        return self.ls * self.hs * self.ws


@dataclass
class PoolRecord:
    output: np.ndarray  # (C, ls, hs, ws)
    argmax: np.ndarray  # (C, ls, hs, ws) flat index into (l, h, w), SENTINEL if empty
    window: tuple[int, int]  # temporal feature range [t0, t1)


def bin_edges(n: int, k: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``k`` bins with edges at ``floor(i * n / k)``.

    When ``n < k`` some bins would be empty; their end is pushed one past the
    start so each bin holds at least one cell.
    """
    out = []
    for i in range(k):
        a = (i * n) // k
        b = max(((i + 1) * n) // k, a + 1)
        out.append((a, b))
    return out


def temporal_window(start: float, end: float, stride: int, length: int) -> tuple[int, int]:
    t0 = math.floor(start / stride)
    t1 = math.ceil(end / stride)
    if t1 <= t0:
        t1 = t0 + 1
    t0, t1 = max(t0, 0), min(t1, length)
    if t1 <= t0:
        raise EmptyRegionError(f"segment [{start}, {end}] lies outside the {length}-cell feature extent")
    return t0, t1


def _spatial_pool(data: np.ndarray, grid: PoolGrid) -> tuple[np.ndarray, np.ndarray]:
    """Max over each spatial bin for every time step: (C, l, hs*ws) values and flat (y, x) argmax."""
    c, l, h, w = data.shape
    vals = np.empty((c, l, grid.hs * grid.ws), dtype=data.dtype)
    idx = np.empty((c, l, grid.hs * grid.ws), dtype=np.int64)
    k = 0
    for y0, y1 in bin_edges(h, grid.hs):
        for x0, x1 in bin_edges(w, grid.ws):
            block = data[:, :, y0:y1, x0:x1].reshape(c, l, -1)
            a = block.argmax(axis=2)
            vals[:, :, k] = np.take_along_axis(block, a[..., None], axis=2)[..., 0]
            bw = x1 - x0
            idx[:, :, k] = (y0 + a // bw) * w + (x0 + a % bw)
            k += 1
    return vals, idx


def roi_pool_many(features: FeatureVolume, segments: np.ndarray, grid: PoolGrid = PoolGrid()) -> list[PoolRecord]:
    """Pool several proposals from one volume, sharing the spatial reduction.

    Max over a bin factors into a spatial max followed by a temporal max, and
    taking the first maximum at each level reproduces the lowest-linear-index
    tie rule of a single flat argmax.
    """
    data = features.data
    c, l, h, w = data.shape
    svals, sidx = _spatial_pool(data, grid)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    records = []
    for start, end in segments:
        t0, t1 = temporal_window(start, end, features.temporal_stride, l)
        out = np.empty((c, grid.ls, grid.hs * grid.ws), dtype=data.dtype)
        arg = np.empty((c, grid.ls, grid.hs * grid.ws), dtype=np.int64)
        for i, (a, b) in enumerate(bin_edges(t1 - t0, grid.ls)):
            block = svals[:, t0 + a:t0 + b]
            ta = block.argmax(axis=1)  # (C, S)
            out[:, i] = np.take_along_axis(block, ta[:, None], axis=1)[:, 0]
            t = t0 + a + ta
            arg[:, i] = t * (h * w) + np.take_along_axis(sidx, t[:, None], axis=1)[:, 0]
        shape = (c, grid.ls, grid.hs, grid.ws)
        records.append(PoolRecord(out.reshape(shape), arg.reshape(shape), (t0, t1)))
    return records


def roi_pool_forward(features: FeatureVolume, proposal, grid: PoolGrid = PoolGrid()) -> PoolRecord:
    seg = np.array([[proposal.start, proposal.end]]) if hasattr(proposal, "start") else proposal
    return roi_pool_many(features, seg, grid)[0]


def roi_pool_backward(grad_output: np.ndarray, record: PoolRecord, input_shape) -> np.ndarray:
    """Scatter ``grad_output`` back onto the cells that won each max."""
    grad_output = np.asarray(grad_output)
    if grad_output.shape != record.output.shape:
        raise ValueError(f"grad_output shape {grad_output.shape} != pooled shape {record.output.shape}")
    c, l, h, w = input_shape
    grad = np.zeros((c, l * h * w), dtype=grad_output.dtype)
    rows = np.broadcast_to(np.arange(c).reshape(c, 1, 1, 1), record.argmax.shape)
    valid = record.argmax != SENTINEL
    np.add.at(grad, (rows[valid], record.argmax[valid]), grad_output[valid])
    return grad.reshape(c, l, h, w)
