"""Desk-scale synthetic end-to-end benchmark.

Generates seeded train/test splits, trains a detector with a fixed-then-decayed
learning rate, and reports detection mAP plus the proposal precision/recall
sanity check.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig, generate_synthetic, load_dataset
from .evaluation import THUMOS_THRESHOLDS, EvalResult, map_at, proposal_pr
from .inference import DetectConfig, detect, video_proposals
from .model import BackboneConfig, Detector, ModelConfig
from .training import TrainConfig, train

logger = logging.getLogger(__name__)


def synthetic_model_config(num_classes: int = 5, channels: int = 8, spatial_dims=(2, 2)) -> ModelConfig:
    """Backbone reaching stride 8 in three stages, then dilated stride-8 convs for a ~250-frame receptive field."""
    return ModelConfig(
        backbone=BackboneConfig(
            in_channels=channels,
            hidden_channels=[32, 32, 64, 64, 64, 64],
            pool_factors=[2, 2, 2, 1, 1, 1],
            dilations=[1, 1, 1, 2, 4, 8],
            spatial_dims=tuple(spatial_dims),
        ),
        num_classes=num_classes,
        proposal_channels=64,
        fc_channels=128,
        pool_grid=(4, 2, 2),
    )


@dataclass
class BenchmarkConfig:
    num_classes: int = 5
    train_videos: int = 200
    test_videos: int = 50
    snr: float = 3.0
    seed: int = 0
    epochs: int = 20
    decay_epochs: int = 16
    lr: float = 0.05
    proposal_score: float = 0.5  # objectness floor for the proposal sanity check
    detect: DetectConfig = field(default_factory=DetectConfig)


@dataclass
class BenchmarkResult:
    eval: EvalResult
    proposal_precision: float
    proposal_recall: float
    train_seconds: float
    num_proposals: int
    epoch_losses: list[float]


def evaluate(model: Detector, test, detect_config: DetectConfig, buffer_length: int = 768, proposal_score: float = 0.5):
    dets, gts, props = [], [], []
    for rec, feats in test:
        for d in detect(model, feats, detect_config, buffer_length):
            dets.append((rec.id, d.class_id, d.segment.start, d.segment.end, d.score))
        for c, s, e in rec.annotations:
            gts.append((rec.id, c, s * rec.fps, e * rec.fps))
        segs, scores = video_proposals(model, feats, detect_config, buffer_length)
        props.extend((rec.id, s, e, sc) for (s, e), sc in zip(segs, scores) if sc >= proposal_score)
    result = map_at(dets, gts, THUMOS_THRESHOLDS)
    precision, recall = proposal_pr(props, [(v, s, e) for v, _, s, e in gts], 0.7)
    return result, precision, recall, len(props)


def run_benchmark(config: BenchmarkConfig, work_dir) -> BenchmarkResult:
    work_dir = Path(work_dir)
    base = SynthConfig(num_classes=config.num_classes, snr=config.snr, video_length=(512, 768))
    train_cfg = SynthConfig(**{**base.__dict__, "num_videos": config.train_videos, "rng_seed": 2 * config.seed})
    test_cfg = SynthConfig(**{**base.__dict__, "num_videos": config.test_videos, "rng_seed": 2 * config.seed + 1})
    train_set = load_dataset(generate_synthetic(train_cfg, work_dir / "data", "train"))
    test_set = load_dataset(generate_synthetic(test_cfg, work_dir / "data", "test"))

    mc = synthetic_model_config(config.num_classes, base.channels, base.spatial_dims)
    tc = TrainConfig(lr=config.lr, epochs=config.epochs, decay_epochs=config.decay_epochs, seed=config.seed)
    losses = []
    t0 = time.perf_counter()
    model = train(train_set, mc, tc, work_dir / "run", on_epoch=lambda e, entry: losses.append(entry["loss"]))
    elapsed = time.perf_counter() - t0
    result, p, r, n = evaluate(model, test_set, config.detect, tc.buffer_length, config.proposal_score)
    return BenchmarkResult(result, p, r, elapsed, n, losses)
