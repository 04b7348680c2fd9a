"""Command-line entry point: ``generate-data``, ``train``, ``detect``, ``eval`` and ``bench``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long flag names, with dashes or underscores). Precedence is built-in default,
then config file, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .benchmark import synthetic_model_config
from .data import (
    SynthConfig,
    generate_synthetic,
    load_annotations,
    load_dataset,
    read_features,
)
from .evaluation import (
    ACTIVITYNET_THRESHOLDS,
    THUMOS_THRESHOLDS,
    map_at,
    proposal_pr,
    speed_benchmark,
    write_summary,
)
from .inference import (
    DetectConfig,
    detect,
    detect_buffer,
    read_detections,
    video_proposals,
    write_detections,
)
from .model import THUMOS_SCALES, Detector, ModelConfig, load_checkpoint
from .training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("tadet")

# Defaults for every overridable option, keyed by argparse dest.
DEFAULTS = {
    "seed": 0,
    "buffer_length": 768,
    "anchor_scales": list(THUMOS_SCALES),
    "stride": 8,
    "proposal_nms": 0.7,
    "eval_iou": 0.5,
    "pos_iou_hi": 0.7,
    "pos_iou_lo": 0.3,
    "cls_iou": 0.5,
    "lam": 1.0,
    "lr": 1e-4,
    "epochs": 15,
    "decay_epochs": 10,
    "lr_decay": 0.1,
    "buffer_mode": "two-way",
    "score_floor": 0.05,
    "max_proposals": 300,
    "proposal_score": 0.5,
    "num_classes": 5,
    "train_videos": 200,
    "test_videos": 50,
    "snr": 3.0,
    "channels": 8,
    "spatial_dims": [2, 2],
    "min_frames": 512,
    "max_frames": 768,
    "min_duration": 0.64,
    "max_duration": 5.12,
    "fps": 25.0,
    "no_overlap": False,
    "thresholds": "thumos",
    "repetitions": 10,
    "warmup": 1,
    "model_config": None,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _opt(p: argparse.ArgumentParser, *flags, **kw) -> None:
    # SUPPRESS keeps unset flags out of the namespace so config files can fill them
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values; explicit flags win")
    _opt(p, "--seed", type=int, help="random seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _buffer_opts(p):
    _opt(p, "--buffer-length", type=int, help="frames per buffer (default 768)")


def _detect_opts(p):
    _opt(p, "--proposal-nms", type=float, help="stage-one NMS IoU (default 0.7)")
    _opt(p, "--eval-iou", type=float, help="evaluation IoU; final NMS runs at this minus 0.1 (default 0.5)")
    _opt(p, "--score-floor", type=float, help="drop detections below this class probability (default 0.05)")
    _opt(p, "--max-proposals", type=int, help="proposals kept per buffer after NMS (default 300)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadet", description="Two-stage temporal activity detection on feature videos.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a seeded synthetic train/test dataset")
    _common(g)
    g.add_argument("--out", type=Path, required=True, help="output directory")
    _opt(g, "--num-classes", type=int)
    _opt(g, "--train-videos", type=int)
    _opt(g, "--test-videos", type=int)
    _opt(g, "--snr", type=float, help="pattern amplitude relative to unit noise")
    _opt(g, "--channels", type=int)
    _opt(g, "--spatial-dims", type=_int_list, help="h,w")
    _opt(g, "--min-frames", type=int)
    _opt(g, "--max-frames", type=int)
    _opt(g, "--min-duration", type=float, help="seconds")
    _opt(g, "--max-duration", type=float, help="seconds")
    _opt(g, "--fps", type=float)
    _opt(g, "--no-overlap", action="store_true", help="forbid overlapping activities")

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    _common(t)
    t.add_argument("--data", type=Path, required=True, help="annotation file of the training split")
    t.add_argument("--out", type=Path, required=True, help="run directory")
    _buffer_opts(t)
    _opt(t, "--anchor-scales", type=_int_list, help="comma list (default 2,4,5,6,8,9,10,12,14,16)")
    _opt(t, "--stride", type=int, help="temporal downsampling of the backbone (default 8)")
    _opt(t, "--pos-iou-hi", type=float)
    _opt(t, "--pos-iou-lo", type=float)
    _opt(t, "--cls-iou", type=float)
    _opt(t, "--lambda", dest="lam", type=float, help="regression loss weight (default 1.0)")
    _opt(t, "--lr", type=float, help="initial learning rate (default 1e-4)")
    _opt(t, "--epochs", type=int)
    _opt(t, "--decay-epochs", type=int, help="epoch at which lr is multiplied by --lr-decay")
    _opt(t, "--lr-decay", type=float)
    _opt(t, "--buffer-mode", choices=["one-way", "two-way"])
    _opt(t, "--proposal-nms", type=float)
    _opt(t, "--num-classes", type=int, help="defaults to the largest class id in the data")
    _opt(t, "--model-config", type=Path, help="JSON model configuration replacing the built-in one")

    d = sub.add_parser("detect", help="run a trained detector over a dataset")
    _common(d)
    d.add_argument("--run", type=Path, required=True, help="run directory written by train")
    d.add_argument("--data", type=Path, required=True, help="annotation file listing the videos")
    d.add_argument("--out", type=Path, required=True, help="detection TSV to write")
    d.add_argument("--proposals-out", type=Path, help="also write stage-one proposals (video, start_s, end_s, score)")
    _buffer_opts(d)
    _detect_opts(d)

    e = sub.add_parser("eval", help="score detections against annotations")
    _common(e)
    e.add_argument("--detections", type=Path, required=True)
    e.add_argument("--annotations", type=Path, required=True)
    e.add_argument("--summary", type=Path, help="write a JSON summary here")
    e.add_argument("--proposals", type=Path, help="proposal TSV for the precision/recall check")
    _opt(e, "--thresholds", help="'thumos', 'activitynet' or a comma list of IoUs")
    _opt(e, "--proposal-score", type=float, help="objectness floor for the proposal check (default 0.5)")

    b = sub.add_parser("bench", help="measure inference throughput")
    _common(b)
    b.add_argument("--run", type=Path, help="run directory; a randomly initialized model is used when omitted")
    _buffer_opts(b)
    _detect_opts(b)
    _opt(b, "--repetitions", type=int)
    _opt(b, "--warmup", type=int)
    _opt(b, "--num-classes", type=int)
    _opt(b, "--channels", type=int)
    _opt(b, "--spatial-dims", type=_int_list)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags into one option dict."""
    opts = dict(DEFAULTS)
    given = set(vars(args))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SystemExit(f"tadet: cannot read config {args.config}: {exc}")
        if not isinstance(loaded, dict):
            raise SystemExit(f"tadet: config {args.config} must hold a JSON object")
        for k, v in loaded.items():
            key = k.replace("-", "_")
            key = "lam" if key == "lambda" else key
            if key not in DEFAULTS:
                raise SystemExit(f"tadet: unknown option {k!r} in {args.config}")
            opts[key] = v
            given.add(key)
    opts.update(vars(args))
    opts["_given"] = given
    return opts


def _detect_config(o) -> DetectConfig:
    return DetectConfig(o["proposal_nms"], o["eval_iou"], o["score_floor"], o["max_proposals"])


def cmd_generate(o) -> int:
    base = dict(
        num_classes=o["num_classes"],
        video_length=(o["min_frames"], o["max_frames"]),
        duration=(o["min_duration"], o["max_duration"]),
        fps=o["fps"],
        snr=o["snr"],
        channels=o["channels"],
        spatial_dims=tuple(o["spatial_dims"]),
        allow_overlap=not o["no_overlap"],
    )
    for split, n, seed in (("train", o["train_videos"], 2 * o["seed"]), ("test", o["test_videos"], 2 * o["seed"] + 1)):
        path = generate_synthetic(SynthConfig(num_videos=n, rng_seed=seed, **base), o["out"], split)
        print(f"wrote {n} videos to {path}")
    return 0


def _load_model(run: Path) -> Detector:
    cfg = ModelConfig.from_dict(json.loads((run / "model_config.json").read_text()))
    model = Detector(cfg)
    load_checkpoint(run / "model.tdck", model)
    return model


def cmd_train(o) -> int:
    data = load_dataset(o["data"])
    if not data:
        raise SystemExit(f"tadet: {o['data']} lists no videos")
    if o["model_config"]:
        mc = ModelConfig.from_dict(json.loads(Path(o["model_config"]).read_text()))
    else:
        feats = data[0][1]
        if "num_classes" in o["_given"]:
            num_classes = o["num_classes"]
        else:
            num_classes = max((c for rec, _ in data for c, _, _ in rec.annotations), default=1)
        mc = synthetic_model_config(num_classes, feats.shape[0], feats.shape[2:])
    mc.anchor_scales = tuple(o["anchor_scales"])
    if o["stride"] != mc.stride:
        raise SystemExit(f"tadet: --stride {o['stride']} does not match the backbone's downsampling {mc.stride}")
    tc = TrainConfig(
        lr=o["lr"],
        epochs=o["epochs"],
        decay_epochs=o["decay_epochs"],
        lr_decay=o["lr_decay"],
        seed=o["seed"],
        buffer_length=o["buffer_length"],
        buffer_mode=o["buffer_mode"],
        pos_iou_hi=o["pos_iou_hi"],
        pos_iou_lo=o["pos_iou_lo"],
        cls_iou=o["cls_iou"],
        lam=o["lam"],
        proposal_nms=o["proposal_nms"],
    )
    try:
        train(data, mc, tc, o["out"], on_epoch=lambda e, entry: print(json.dumps(entry), flush=True))
    except TrainingDiverged as exc:
        print(f"tadet: training diverged: {exc}", file=sys.stderr)
        return 2
    print(f"checkpoint written to {o['out'] / 'model.tdck'}")
    return 0


def cmd_detect(o) -> int:
    model = _load_model(o["run"])
    cfg = _detect_config(o)
    rows, fps, props = [], {}, []
    for rec in load_annotations(o["data"]):
        feats = read_features(o["data"].parent / rec.features)
        fps[rec.id] = rec.fps
        rows.extend((rec.id, det) for det in detect(model, feats, cfg, o["buffer_length"]))
        if o.get("proposals_out"):
            segs, scores = video_proposals(model, feats, cfg, o["buffer_length"])
            props.extend((rec.id, s / rec.fps, e / rec.fps, sc) for (s, e), sc in zip(segs, scores))
    write_detections(o["out"], rows, fps)
    print(f"wrote {len(rows)} detections to {o['out']}")
    if o.get("proposals_out"):
        with open(o["proposals_out"], "w") as fh:
            fh.writelines(f"{vid}\t{s:.6f}\t{e:.6f}\t{sc:.6f}\n" for vid, s, e, sc in props)
        print(f"wrote {len(props)} proposals to {o['proposals_out']}")
    return 0


def _thresholds(spec) -> list[float]:
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    if spec == "thumos":
        return list(THUMOS_THRESHOLDS)
    if spec == "activitynet":
        return list(ACTIVITYNET_THRESHOLDS)
    try:
        return [float(v) for v in str(spec).split(",")]
    except ValueError:
        raise SystemExit(f"tadet: bad --thresholds {spec!r}") from None


def cmd_eval(o) -> int:
    records = load_annotations(o["annotations"])
    gts = [(r.id, c, s, e) for r in records for c, s, e in r.annotations]
    dets = read_detections(o["detections"])
    result = map_at(dets, gts, _thresholds(o["thresholds"]))
    print(result.table())
    extra = {"num_detections": len(dets), "num_ground_truths": len(gts)}
    if o.get("proposals"):
        props = []
        with open(o["proposals"]) as fh:
            for line in fh:
                if line.strip():
                    vid, s, e, sc = line.rstrip("\n").split("\t")
                    if float(sc) >= o["proposal_score"]:
                        props.append((vid, float(s), float(e), float(sc)))
        p, r = proposal_pr(props, [(v, s, e) for v, _, s, e in gts], 0.7)
        print(f"proposals at IoU 0.7: precision {p:.4f} recall {r:.4f} ({len(props)} proposals)")
        extra.update(proposal_precision=p, proposal_recall=r, num_proposals=len(props))
    if o.get("summary"):
        write_summary(result, o["summary"], extra)
        print(f"summary written to {o['summary']}")
    return 0


def cmd_bench(o) -> int:
    if o.get("run"):
        model = _load_model(o["run"])
    else:
        model = Detector(synthetic_model_config(o["num_classes"], o["channels"], o["spatial_dims"]), seed=o["seed"])
    bb = model.config.backbone
    length = o["buffer_length"]
    rng = np.random.default_rng(o["seed"])
    buf = rng.standard_normal((bb.in_channels, length, *bb.spatial_dims)).astype(np.float32)
    cfg = _detect_config(o)

    def run() -> int:
        detect_buffer(model, buf, cfg)
        return length

    report = speed_benchmark(run, o["repetitions"], o["warmup"])
    for line in report.lines():
        print(line)
    return 0


COMMANDS = {"generate-data": cmd_generate, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    opts = resolve(args)
    with threadpool_limits(limits=1):
        return COMMANDS[args.command](opts)


if __name__ == "__main__":
    sys.exit(main())
