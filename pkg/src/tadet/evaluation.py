"""Detection metrics, the proposal sanity check and a throughput harness.

Detections are ``(video_id, class_id, start, end, score)`` tuples and ground
truths are ``(video_id, class_id, start, end)``; the time unit only has to be
consistent between the two.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from collections import defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
ACTIVITYNET_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# Reported inference speeds of the original GPU implementation. Different
# backbone and hardware: printed for context, never compared against.
REFERENCE_FPS = {"Titan X Maxwell": 569.0, "Titan X Pascal": 1030.0}


@dataclass
class EvalResult:
    per_class_ap: dict[int, dict[float, float]] = field(default_factory=dict)
    map_at: dict[float, float] = field(default_factory=dict)
    average_map: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(c): {f"{a:g}": v for a, v in aps.items()} for c, aps in self.per_class_ap.items()},
            "map_at": {f"{a:g}": v for a, v in self.map_at.items()},
            "average_map": self.average_map,
        }

    def table(self) -> str:
        alphas = list(self.map_at)
        head = "class   " + "".join(f"{a:>8g}" for a in alphas)
        lines = [head, "-" * len(head)]
        for c in sorted(self.per_class_ap):
            lines.append(f"{c:<8d}" + "".join(f"{self.per_class_ap[c][a]:8.4f}" for a in alphas))
        lines.append("-" * len(head))
        lines.append("mAP     " + "".join(f"{self.map_at[a]:8.4f}" for a in alphas))
        lines.append(f"average mAP {self.average_map:.4f}")
        return "\n".join(lines)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[step] - mrec[step - 1]) * mpre[step]))


def match_detections(detections, gts, iou_threshold: float) -> np.ndarray:
    """Flag each detection as a true positive, in descending score order.

    ``detections`` are ``(video, start, end, score)`` and ``gts`` are
    ``(video, start, end)`` for a single class. A detection claims the
    unmatched ground truth of its video with the highest IoU, provided that
    IoU is at least ``iou_threshold``. Equal scores keep input order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][3])
    by_video = defaultdict(list)
    for j, (vid, s, e) in enumerate(gts):
        by_video[vid].append(j)
    gt_arr = np.array([[s, e] for _, s, e in gts], dtype=np.float64).reshape(-1, 2)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(detections), dtype=bool)
    for rank, i in enumerate(order):
        vid, s, e, _ = detections[i]
        cand = [j for j in by_video.get(vid, ()) if not used[j]]
        if not cand:
            continue
        ious = iou_matrix(np.array([[s, e]]), gt_arr[cand])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[cand[best]] = True
            tp[rank] = True
    return tp


def average_precision(detections, gts, iou_threshold: float) -> float | None:
    """AP for one class; ``None`` when there is no ground truth to recall."""
    if not gts:
        return None
    if not detections:
        return 0.0
    tp = match_detections(detections, gts, iou_threshold)
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    return interpolated_ap(recall, precision)


def map_at(detections: Iterable, gts: Iterable, thresholds: Sequence[float] = THUMOS_THRESHOLDS) -> EvalResult:
    """Per-class AP, class-mean AP at each threshold, and their mean."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    dets_by_class, gts_by_class = defaultdict(list), defaultdict(list)
    for vid, c, s, e, score in detections:
        dets_by_class[int(c)].append((vid, s, e, score))
    for vid, c, s, e in gts:
        gts_by_class[int(c)].append((vid, s, e))

    result = EvalResult()
    for c in sorted(gts_by_class):
        result.per_class_ap[c] = {a: average_precision(dets_by_class[c], gts_by_class[c], a) for a in thresholds}
    for a in thresholds:
        aps = [result.per_class_ap[c][a] for c in result.per_class_ap]
        result.map_at[a] = float(np.mean(aps)) if aps else 0.0
    result.average_map = float(np.mean(list(result.map_at.values())))
    return result


def proposal_pr(proposals, gts, iou_threshold: float = 0.7) -> tuple[float, float]:
    """Precision and recall of class-agnostic proposals.

    ``proposals`` are ``(video, start, end, ...)`` and ``gts`` ``(video, start, end, ...)``.
    A proposal is correct when its IoU with some ground truth of its video is
    strictly above ``iou_threshold``. An empty proposal set has precision 0.
    """
    props_by_video, gts_by_video = defaultdict(list), defaultdict(list)
    for p in proposals:
        props_by_video[p[0]].append(p[1:3])
    for g in gts:
        gts_by_video[g[0]].append(g[1:3])
    n_props = sum(len(v) for v in props_by_video.values())
    n_gts = sum(len(v) for v in gts_by_video.values())
    correct = covered = 0
    for vid, g in gts_by_video.items():
        p = props_by_video.get(vid)
        if not p:
            continue
        hit = iou_matrix(np.array(p), np.array(g)) > iou_threshold
        correct += int(hit.any(axis=1).sum())
        covered += int(hit.any(axis=0).sum())
    precision = correct / n_props if n_props else 0.0
    recall = covered / n_gts if n_gts else 0.0
    return precision, recall


# -- throughput ------------------------------------------------------------------

def hardware_descriptor() -> str:
    import os

    return f"{platform.processor() or platform.machine()} / {os.cpu_count()} logical CPUs / {platform.python_implementation()} {platform.python_version()}"


@dataclass
class SpeedReport:
    fps: float
    mad_fraction: float
    per_rep_fps: list[float]
    frames_per_rep: int
    hardware: str

    def lines(self) -> list[str]:
        out = [
            f"throughput: {self.fps:.1f} frames/s (median of {len(self.per_rep_fps)} repetitions, "
            f"MAD {100 * self.mad_fraction:.1f}% of median)",
            f"hardware: {self.hardware}",
            "reference points from the original GPU implementation (NOT comparable: different backbone and hardware):",
        ]
        out += [f"  {name}: {fps:g} fps" for name, fps in REFERENCE_FPS.items()]
        return out


def speed_benchmark(run: Callable[[], int], repetitions: int = 10, warmup: int = 1, clock=time.perf_counter) -> SpeedReport:
    """Time ``run`` (which returns the number of frames it processed).

    Warm-up calls are excluded. Reports the median fps over repetitions and
    the median absolute deviation relative to it.
    """
    for _ in range(warmup):
        run()
    rates, frames = [], 0
    for _ in range(repetitions):
        t0 = clock()
        frames = run()
        dt = clock() - t0
        rates.append(frames / dt)
    med = statistics.median(rates)
    mad = statistics.median(abs(r - med) for r in rates)
    return SpeedReport(med, mad / med, rates, frames, hardware_descriptor())


def write_summary(result: EvalResult, path, extra: dict | None = None) -> None:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
