"""Command line: ``python -m sprd {synth,train,infer,eval,gradcheck} ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import Config
from .data import SceneSpec, generate_scenes, read_dataset, worker_count, write_dataset
from .model import SPRModel

log = logging.getLogger("sprd")


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    over = {}
    if getattr(args, "fusion", None):
        over["fusion"] = args.fusion
    if getattr(args, "pyramid", None):
        over["pyramid"] = args.pyramid
    if getattr(args, "shortcut", None):
        over["shortcut"] = args.shortcut == "on"
    if getattr(args, "mask_iou_thresh", None) is not None:
        over["mask_iou_thresh"] = args.mask_iou_thresh
    if getattr(args, "seed", None) is not None and args.cmd == "train":
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    return cfg.replace(**over) if over else cfg


def cmd_synth(args) -> int:
    lo = args.size_min or max(1, args.image_size // 8)
    hi = args.size_max or args.image_size // 2
    spec = SceneSpec(seed=args.seed, image_size=args.image_size, size_range=(lo, hi))
    scenes = generate_scenes(spec, args.count, args.start)
    write_dataset(args.out, scenes)
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    scenes = read_dataset(args.data)
    model = SPRModel(cfg)
    stream = open(args.log, "w") if args.log else sys.stdout
    try:
        train(model, scenes, cfg.steps, stream, log_every=args.log_every)
    finally:
        if args.log:
            stream.close()
    if args.out_ckpt:
        save_checkpoint(model.store, args.out_ckpt, cfg.model_digest(), cfg.to_text())
        log.info("checkpoint saved to %s", args.out_ckpt)
    return 0


def cmd_infer(args) -> int:
    from .inference import predict_dataset

    ck = read_checkpoint(args.ckpt)
    cfg = Config.load(args.config) if args.config else Config.from_text(ck.config_text)
    model = SPRModel(cfg)
    load_checkpoint(model.store, args.ckpt, cfg.model_digest(), force=args.force)
    scenes = read_dataset(args.data)
    records = predict_dataset(model, scenes, workers=worker_count())
    Path(args.out_json).write_text(json.dumps(records, separators=(",", ":")))
    log.info("%d detections on %d images -> %s", len(records), len(scenes), args.out_json)
    return 0


def cmd_eval(args) -> int:
    from .cocoeval import evaluate, items_from_annotations, write_pr_csv

    dets = json.loads(Path(args.pred_json).read_text())
    ann = json.loads(Path(args.ann_json).read_text())
    result, arrays = evaluate(dets, items_from_annotations(ann))
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.pr_csv:
        write_pr_csv(args.pr_csv, arrays)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    ok = run_all(args.ops, trials=args.trials, tol=args.tol, network_tol=args.network_tol)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sprd", description="single-pixel-reconstruction instance segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--start", type=int, default=0, help="first scene index")
    s.add_argument("--image-size", type=int, default=128)
    s.add_argument("--size-min", type=int, help="smallest shape extent in px (default image size / 8)")
    s.add_argument("--size-max", type=int, help="largest shape extent in px (default image size / 2)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-ckpt")
    t.add_argument("--fusion", choices=("dilated", "consecutive", "parallel1246"))
    t.add_argument("--pyramid", choices=("gfpn", "fpn"))
    t.add_argument("--shortcut", choices=("on", "off"))
    t.add_argument("--mask-iou-thresh", type=float)
    t.add_argument("--log", help="metrics CSV path (default stdout)")
    t.add_argument("--log-every", type=int, default=1)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict detections for a dataset")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out-json", required=True)
    i.add_argument("--config", help="run config; defaults to the one stored in the checkpoint")
    i.add_argument("--force", action="store_true", help="load despite a config digest mismatch")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="COCO-style box and mask metrics")
    e.add_argument("--pred-json", required=True)
    e.add_argument("--ann-json", required=True)
    e.add_argument("--out")
    e.add_argument("--pr-csv")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--ops", default="all", help="'all' or comma-separated op names")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--network-tol", type=float, default=1e-4)
    g.add_argument("--trials", type=int, default=100)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # unknown flags exit 2 with usage
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"sprd {args.cmd}: error: {e}", file=sys.stderr)
        return 1
