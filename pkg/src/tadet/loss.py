"""Softmax classification plus smooth-L1 regression objective.

Both subnets use the same form: the classification term is averaged over the
sampled batch, the regression term only counts positives and is averaged over
their number, and the two are combined with weight ``lam``. Every function
returns gradients alongside values so the caller can seed backpropagation.
All accumulation happens in float64.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np


@dataclass
class LossReport:
    cls_loss: float
    reg_loss: float
    total: float
    n_cls: int
    n_reg: int
    lam: float

    def __add__(self, other: LossReport) -> LossReport:
        # summing the two subnets' objectives for joint optimization
        return LossReport(
            self.cls_loss + other.cls_loss,
            self.reg_loss + other.reg_loss,
            self.total + other.total,
            self.n_cls + other.n_cls,
            self.n_reg + other.n_reg,
            self.lam,
        )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad


def cross_entropy_rows(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row softmax losses ``(N,)`` and their gradients ``(N, K)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError("label out of range")
    lp = log_softmax(logits)
    rows = np.arange(labels.shape[0])
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    return -lp[rows, labels], grad


def smooth_l1(pred, target) -> tuple[float, np.ndarray]:
    """Sum over coordinates of ``0.5 x^2`` for ``|x| < 1`` else ``|x| - 0.5``."""
    loss, grad = smooth_l1_rows(np.reshape(pred, (1, -1)), np.reshape(target, (1, -1)))
    return float(loss[0]), grad[0]


def smooth_l1_rows(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ax = np.abs(x)
    quad = ax < 1.0
    loss = np.where(quad, 0.5 * x * x, ax - 0.5).sum(axis=-1)
    grad = np.where(quad, x, np.sign(x))
    return loss, grad


def stage_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    pred: np.ndarray,
    target: np.ndarray,
    positive: np.ndarray,
    lam: float = 1.0,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Vectorized objective for one subnet over a sampled batch.

    Returns the report and the gradients w.r.t. ``logits`` and ``pred``.
    Rows of ``pred`` for non-positives receive zero gradient.
    """
    n_cls = logits.shape[0]
    positive = np.asarray(positive, dtype=bool)
    n_reg = int(positive.sum())
    losses, dlogits = cross_entropy_rows(logits, labels)
    cls_loss = float(losses.sum() / n_cls) if n_cls else 0.0
    dlogits = dlogits / max(n_cls, 1)

    dpred = np.zeros(np.shape(pred), dtype=np.float64)
    reg_loss = 0.0
    if n_reg:
        rl, rg = smooth_l1_rows(np.asarray(pred)[positive], np.asarray(target)[positive])
        reg_loss = float(rl.sum() / n_reg)
        dpred[positive] = lam * rg / n_reg
    report = LossReport(cls_loss, reg_loss, cls_loss + lam * reg_loss, n_cls, n_reg, lam)
    return report, dlogits, dpred


def joint_loss(
    cls_terms: Sequence[tuple[np.ndarray, int]],
    reg_terms: Sequence[tuple[np.ndarray, np.ndarray, bool]],
    lam: float = 1.0,
) -> LossReport:
    """List-based front end to :func:`stage_loss`."""
    logits = np.stack([np.asarray(l, dtype=np.float64) for l, _ in cls_terms]) if cls_terms else np.zeros((0, 2))
    labels = np.array([y for _, y in cls_terms], dtype=np.int64)
    if reg_terms:
        pred = np.stack([np.asarray(p, dtype=np.float64) for p, _, _ in reg_terms])
        target = np.stack([np.asarray(t, dtype=np.float64) for _, t, _ in reg_terms])
        positive = np.array([bool(g) for _, _, g in reg_terms])
    else:
        pred = target = np.zeros((0, 2))
        positive = np.zeros(0, dtype=bool)
    n_cls = logits.shape[0]
    losses = cross_entropy_rows(logits, labels)[0] if n_cls else np.zeros(0)
    cls_loss = float(losses.sum() / n_cls) if n_cls else 0.0
    n_reg = int(positive.sum())
    reg_loss = float(smooth_l1_rows(pred[positive], target[positive])[0].sum() / n_reg) if n_reg else 0.0
    return LossReport(cls_loss, reg_loss, cls_loss + lam * reg_loss, n_cls, n_reg, lam)
