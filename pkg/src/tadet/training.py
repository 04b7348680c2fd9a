"""End-to-end training: one buffer per step, both subnets optimized jointly."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .assignment import (
    SamplerConfig,
    assign_class_labels,
    assign_proposal_labels,
    sample_minibatch,
)
from .data import VideoRecord
from .geometry import NonFiniteOffsetError
from .inference import (
    anchors_for,
    build_buffers,
    extract_buffer,
    proposals_from_head,
    segments_to_buffer,
)
from .loss import LossReport, stage_loss
from .model import Detector, ModelConfig, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 15
    decay_epochs: int = 10  # lr is multiplied by lr_decay from this epoch on
    lr_decay: float = 0.1
    seed: int = 0
    buffer_length: int = 768
    buffer_mode: str = "two-way"
    pos_iou_hi: float = 0.7
    pos_iou_lo: float = 0.3
    cls_iou: float = 0.5
    lam: float = 1.0
    proposal_batch: int = 64
    proposal_fraction: float = 0.5
    cls_batch: int = 64
    cls_fraction: float = 0.25
    proposal_nms: float = 0.7
    train_max_proposals: int = 300
    grad_clip: float | None = None  # global L2 norm; None disables

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay if epoch >= self.decay_epochs else 1.0)


@dataclass
class StepPlan:
    """The discrete choices of one step: sampled anchors, stage-2 proposals and their sample.

    Fixing a plan makes the step loss a smooth function of the parameters,
    which is what gradient checking needs.
    """

    anchor_idx: np.ndarray
    anchor_labels: np.ndarray
    anchor_targets: np.ndarray
    proposals: np.ndarray
    cls_labels: np.ndarray
    cls_targets: np.ndarray


@dataclass
class StepResult:
    proposal: LossReport
    classifier: LossReport
    plan: StepPlan | None = None

    @property
    def total(self) -> float:
        return self.proposal.total + self.classifier.total


def _clip_gts(gts: np.ndarray, classes: np.ndarray, valid: int) -> tuple[np.ndarray, np.ndarray]:
    gts = np.clip(gts, 0.0, float(valid))
    keep = (gts[:, 1] - gts[:, 0]) > 0
    return gts[keep], classes[keep]


def _make_plan(model, anchors, logits, offsets, gts, gt_classes, config, rng, length) -> StepPlan:
    std = np.asarray(model.config.offset_std)
    table = assign_proposal_labels(anchors, gts, config.pos_iou_hi, config.pos_iou_lo)
    idx = sample_minibatch(table, SamplerConfig(config.proposal_batch, config.proposal_fraction), rng)
    props, _ = proposals_from_head(
        anchors, logits, offsets, length, config.proposal_nms, config.train_max_proposals, model.config.offset_std,
    )
    props = np.concatenate([props, gts]) if gts.size else props
    if props.shape[0] == 0:
        props = anchors.anchors[:1].clip(0, length)
    ctable = assign_class_labels(props, gts, gt_classes, config.cls_iou)
    cidx = sample_minibatch(ctable, SamplerConfig(config.cls_batch, config.cls_fraction), rng)
    return StepPlan(
        idx,
        (table.labels[idx] > 0).astype(np.int64),
        table.targets[idx] / std,
        props[cidx],
        ctable.labels[cidx],
        ctable.targets[cidx] / std,
    )


def compute_step(
    model: Detector,
    buffer: np.ndarray,
    gts: np.ndarray,
    gt_classes: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    plan: StepPlan | None = None,
    backward: bool = True,
) -> StepResult:
    """Forward both subnets, evaluate the joint loss and backpropagate into the parameter grads.

    Without a ``plan`` the sampling is drawn from ``rng`` using this forward
    pass; the plan used is returned on the result.
    """
    length = buffer.shape[1]
    anchors = anchors_for(model, length)
    feats = model.backbone_forward(buffer)
    logits, offsets = model.proposal_forward(feats)
    if plan is None:
        if rng is None:
            raise ValueError("need an rng to sample a step plan")
        plan = _make_plan(model, anchors, logits.data, offsets.data, gts, gt_classes, config, rng, length)

    idx, labels = plan.anchor_idx, plan.anchor_labels
    rep1, dlog, doff = stage_loss(logits.data[idx], labels, offsets.data[idx], plan.anchor_targets, labels > 0, config.lam)
    g_logits = np.zeros(logits.shape)
    g_offsets = np.zeros(offsets.shape)
    g_logits[idx] = dlog
    g_offsets[idx] = doff

    cls_logits, cls_offsets = model.classifier_forward(model.pool(feats, plan.proposals))
    clab = plan.cls_labels
    rows = np.arange(clab.size)
    pred = cls_offsets.data[rows, clab]
    rep2, dcls, dpred = stage_loss(cls_logits.data, clab, pred, plan.cls_targets, clab > 0, config.lam)
    g_coff = np.zeros(cls_offsets.shape)
    g_coff[rows, clab] = dpred

    if backward:
        ag.backward([(logits, g_logits), (offsets, g_offsets), (cls_logits, dcls), (cls_offsets, g_coff)])
    return StepResult(rep1, rep2, plan)


def sgd_update(model: Detector, lr: float, grad_clip: float | None = None) -> None:
    params = list(model.params)
    scale = 1.0
    if grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for _, t in params if t.grad is not None))
        if norm > grad_clip:
            scale = grad_clip / norm
    for _, t in params:
        if t.grad is not None:
            t.data -= (lr * scale) * t.grad
        t.zero_grad()


def training_items(dataset: Sequence[tuple[VideoRecord, np.ndarray]], config: TrainConfig, stride: int = 8):
    """Every (video index, buffer window) pair the schedule iterates over in one epoch."""
    items = []
    for i, (rec, feats) in enumerate(dataset):
        plan = build_buffers(feats.shape[1], config.buffer_length, config.buffer_mode, stride)
        items.extend((i, w) for w in plan.windows)
    return items


def buffer_example(rec: VideoRecord, feats: np.ndarray, window, buffer_length: int):
    buf = extract_buffer(feats, window, buffer_length)
    gts = segments_to_buffer(rec.segments_frames(), window, feats.shape[1])
    gts, classes = _clip_gts(gts, rec.classes(), window.valid)
    return buf, gts, classes


def train(
    dataset: Sequence[tuple[VideoRecord, np.ndarray]],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[int, dict], None] | None = None,
    on_step: Callable[[int, StepResult], None] | None = None,
) -> Detector:
    """Train a fresh detector with plain SGD and a staged learning-rate decay.

    Writes ``model.tdck``, ``model_config.json`` and ``train_log.jsonl`` into
    ``out_dir`` when given. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if not dataset:
        raise ValueError("training set is empty")
    with threadpool_limits(limits=1):
        rng = np.random.default_rng(config.seed)
        model = Detector(model_config, seed=config.seed)
        items = training_items(dataset, config, model_config.stride)
        log = []
        step = 0
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            totals = []
            parts = np.zeros(4)
            for k in rng.permutation(len(items)):
                vi, win = items[k]
                rec, feats = dataset[vi]
                buf, gts, classes = buffer_example(rec, feats, win, config.buffer_length)
                try:
                    res = compute_step(model, buf, gts, classes, config, rng)
                except NonFiniteOffsetError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, step {step} (video {rec.id}): {exc}") from exc
                if not math.isfinite(res.total) or not model.params.grads_finite():
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step} (video {rec.id})")
                sgd_update(model, lr, config.grad_clip)
                if not all(np.all(np.isfinite(t.data)) for _, t in model.params):
                    raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}, step {step}")
                totals.append(res.total)
                parts += (res.proposal.cls_loss, res.proposal.reg_loss, res.classifier.cls_loss, res.classifier.reg_loss)
                if on_step:
                    on_step(step, res)
                step += 1
            parts /= max(len(totals), 1)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "steps": len(totals),
                "loss": float(np.mean(totals)),
                "proposal_cls": float(parts[0]),
                "proposal_reg": float(parts[1]),
                "classifier_cls": float(parts[2]),
                "classifier_reg": float(parts[3]),
            }
            log.append(entry)
            logger.info(
                "epoch %d lr %.2e loss %.4f (proposal %.4f + %.4f, classifier %.4f + %.4f)",
                epoch, lr, entry["loss"], *parts,
            )
            if on_epoch:
                on_epoch(epoch, entry)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out_dir / "model.tdck", model.params)
            (out_dir / "model_config.json").write_text(json.dumps(model_config.to_dict(), indent=2))
            with open(out_dir / "train_log.jsonl", "w") as fh:
                fh.writelines(json.dumps(e) + "\n" for e in log)
    return model
