"""Target preparation, the end-to-end training step and the training loop."""
from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .labels import IGNORE, POSITIVE, BoxLabels, MaskTarget, assign_box_labels, build_mask_targets
from .losses import LossConfig, focal_loss, mask_bce_loss, smooth_l1_loss, total_loss
from .model import SPRModel, image_tensor
from .optim import OptimConfig, adam_step, clip_gradients

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
METRIC_FIELDS = ("step", "L_cls", "L_reg", "L_mask", "total", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ImageTargets:
    labels: BoxLabels
    masks: list  # MaskTarget entries


def loss_config(cfg: Config) -> LossConfig:
    return LossConfig(cfg.focal_alpha, cfg.focal_gamma, cfg.smooth_l1_beta, cfg.w_cls, cfg.w_reg, cfg.w_mask)


def optim_config(cfg: Config) -> OptimConfig:
    return OptimConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)


def gt_arrays(scene):
    boxes = np.array([inst.box for inst in scene.instances], dtype=np.float64).reshape(-1, 4)
    classes = np.array([inst.class_id for inst in scene.instances], dtype=np.int64)
    masks = [inst.mask for inst in scene.instances]
    return boxes, classes, masks


def prepare_targets(model: SPRModel, scene, batch: int = 0) -> ImageTargets:
    cfg = model.cfg
    grid = model.anchor_grid(scene.height, scene.width)
    boxes, classes, masks = gt_arrays(scene)
    labels = assign_box_labels(grid.boxes, boxes, classes, cfg.pos_iou, cfg.neg_iou)
    mt = build_mask_targets(grid, boxes, masks, cfg.mask_iou_thresh, cfg.mask_cap, batch) if len(boxes) else []
    return ImageTargets(labels, mt)


def compute_losses(model: SPRModel, scenes, targets=None) -> dict:
    """Forward all three branches on every level and return the loss parts."""
    cfg = model.cfg
    if len({(s.height, s.width) for s in scenes}) != 1:
        raise ValueError("all images in a batch must share one size")
    if targets is None:
        targets = [prepare_targets(model, s, b) for b, s in enumerate(scenes)]
    images = image_tensor(np.stack([s.image for s in scenes]), model.dtype)
    pyr = model.pyramid(images)
    cls_rows, box_rows = model.heads(pyr)
    n = len(scenes)
    K = cfg.num_classes
    cls_all = T.reshape(T.concat(cls_rows, axis=1), (-1, K))
    box_all = T.reshape(T.concat(box_rows, axis=1), (-1, 4))

    classes = np.concatenate([t.labels.classes for t in targets])
    state = np.concatenate([t.labels.state for t in targets])
    deltas = np.concatenate([t.labels.deltas for t in targets])
    num_pos = int((state == POSITIVE).sum())
    norm = max(1, num_pos)
    l_cls = focal_loss(cls_all, classes, state != IGNORE, cfg.focal_alpha, cfg.focal_gamma, normalizer=norm)
    pos = np.flatnonzero(state == POSITIVE)
    if len(pos):
        l_reg = smooth_l1_loss(T.take_rows(box_all, pos), deltas[pos], cfg.smooth_l1_beta, normalizer=norm)
    else:
        l_reg = T.Tensor(np.zeros((), dtype=model.dtype))

    # mask branch: per-image cap already applied; batch index travels in PixelRef
    mask_targets = [m for t in targets for m in t.masks]
    if mask_targets and cfg.w_mask > 0:
        cols, grids, cls_ids = [], [], []
        for lvl in range(len(pyr.levels)):
            picks = [m for m in mask_targets if m.ref.level == lvl]
            if not picks:
                continue
            fused = model.fuse(pyr.levels[lvl])
            cols.append(T.gather_pixels(fused, [m.ref.batch for m in picks], [m.ref.y for m in picks],
                                        [m.ref.x for m in picks]))
            for m in picks:
                grids.append(m.grid)
                cls_ids.append(scenes[m.ref.batch].instances[m.gt_index].class_id)
        logits = model.decode(T.concat(cols, axis=0))
        l_mask = mask_bce_loss(logits, np.stack(grids), cls_ids)
    else:
        l_mask = T.Tensor(np.zeros((), dtype=model.dtype))
    return {"cls": l_cls, "reg": l_reg, "mask": l_mask, "num_pos": num_pos, "num_mask": len(mask_targets)}


def train_step(model: SPRModel, scenes, loss_cfg: LossConfig | None = None, optim: OptimConfig | None = None,
               targets=None) -> dict:
    """One forward/backward/clip/Adam update; returns the per-part loss values."""
    loss_cfg = loss_cfg or loss_config(model.cfg)
    optim = optim or OptimConfig()
    parts = compute_losses(model, scenes, targets)
    losses = {k: parts[k] for k in ("cls", "reg", "mask")}
    total = total_loss(losses, loss_cfg)
    value = float(total.data)
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"total loss {value} exceeds divergence limit {DIVERGENCE_LIMIT}")
    model.store.zero_grad()
    total.backward()
    grad_norm = clip_gradients(model.store, optim.clip)
    # mask parameters legitimately have no gradient on steps without mask targets
    adam_step(model.store, optim.lr, optim.beta1, optim.beta2, optim.eps, warn_missing=False)
    return {"L_cls": float(losses["cls"].data), "L_reg": float(losses["reg"].data),
            "L_mask": float(losses["mask"].data), "total": value, "grad_norm": grad_norm,
            "num_pos": parts["num_pos"], "num_mask": parts["num_mask"]}


def format_metrics(step: int, rec: dict) -> str:
    return ",".join([str(step)] + [f"{rec[k]:.6g}" for k in METRIC_FIELDS[1:]])


def train(model: SPRModel, scenes, steps: int | None = None, log_stream=None, seed: int | None = None,
          log_every: int = 1) -> list:
    """Run ``steps`` updates over shuffled epochs of ``scenes``.

    Targets are prepared once up front; the sample order is drawn from
    ``seed`` (default: the config seed).  Metrics go to ``log_stream`` as CSV.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    model.build(scenes[0].height)
    targets = [prepare_targets(model, s) for s in scenes]
    loss_cfg, optim = loss_config(cfg), optim_config(cfg)
    if log_stream is not None:
        log_stream.write(",".join(METRIC_FIELDS) + "\n")
    history = []
    order = []
    bs = cfg.batch_size
    t0 = time.perf_counter()
    for step in range(steps):
        if len(order) < bs:
            order.extend(rng.permutation(len(scenes)).tolist())
        idx, order = order[:bs], order[bs:]
        batch = [scenes[i] for i in idx]
        batch_targets = []
        for b, i in enumerate(idx):
            t = targets[i]
            if b:
                t = ImageTargets(t.labels, [_rebatch(m, b) for m in t.masks])
            batch_targets.append(t)
        rec = train_step(model, batch, loss_cfg, optim, batch_targets)
        rec["step"] = step
        history.append(rec)
        if log_stream is not None and step % log_every == 0:
            log_stream.write(format_metrics(step, rec) + "\n")
            log_stream.flush()
    log.info("trained %d steps in %.1fs", steps, time.perf_counter() - t0)
    return history


def _rebatch(m, b):
    return MaskTarget(m.ref._replace(batch=b), m.gt_index, m.iou, m.anchor, m.grid)
