"""Inference: top-k pixel sampling, box decoding, mask reconstruction, NMS, pasting."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import rle_encode
from .labels import AnchorGrid, decode_deltas, iou_matrix
from .maskbranch import PixelRef, select_mask_channel
from .model import SPRModel, image_tensor


class Candidate(NamedTuple):
    ref: PixelRef
    anchor: int
    class_id: int
    score: float


@dataclass
class Detection:
    class_id: int
    score: float
    box: np.ndarray
    mask32: np.ndarray = field(repr=False)
    ref: PixelRef | None = None
    anchor: int = -1

    def pasted_mask(self, height: int, width: int, threshold: float = 0.5) -> np.ndarray:
        return paste_mask(self, (height, width), threshold)


def top_k_pixels(scores: list, dims: list, num_anchors: int, k: int = 100, floor: float = 0.0,
                 batch: int = 0) -> list:
    """Global top-k over (level, pixel, anchor, class) score tuples.

    ``scores[l]`` is ``[h*w*A, K]`` for level ``l``.  Ties are broken by the
    natural (level, y, x, anchor, class) order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    flat = np.concatenate([np.asarray(s).reshape(-1) for s in scores])
    K = np.asarray(scores[0]).shape[1]
    cand = np.flatnonzero(flat > floor) if floor > 0 else np.arange(flat.size)
    order = cand[np.argsort(-flat[cand], kind="stable")][:k]
    sizes = [np.asarray(s).size for s in scores]
    offs = np.cumsum([0] + sizes)
    out = []
    for idx in order:
        lvl = int(np.searchsorted(offs, idx, side="right") - 1)
        local = int(idx - offs[lvl])
        row, cls = divmod(local, K)
        pix, a = divmod(row, num_anchors)
        h, w = dims[lvl]
        out.append(Candidate(PixelRef(lvl, pix // w, pix % w, batch), a, cls, float(flat[idx])))
    return out


def decode_detections(model: SPRModel, pyr, selected: list, box_rows: list, grid: AnchorGrid,
                      image_size: tuple) -> list:
    """Boxes from each candidate's scoring anchor, masks from its pixel column."""
    if not selected:
        return []
    A = grid.num_anchors
    boxes = []
    for c in selected:
        h, w = grid.dims[c.ref.level]
        row = (c.ref.y * w + c.ref.x) * A + c.anchor
        anchor = grid.levels[c.ref.level][row]
        deltas = box_rows[c.ref.level][row]
        boxes.append(decode_deltas(anchor, deltas, image_size))
    # one decoder pass per distinct pixel
    pixels = sorted({(c.ref.level, c.ref.y, c.ref.x) for c in selected})
    slot = {p: i for i, p in enumerate(pixels)}
    cols = []
    for lvl in sorted({p[0] for p in pixels}):
        fused = model.fuse(pyr.levels[lvl])
        ps = [p for p in pixels if p[0] == lvl]
        cols.append(T.gather_pixels(fused, [0] * len(ps), [p[1] for p in ps], [p[2] for p in ps]))
    logits = model.decode(T.concat(cols, axis=0))
    dets = []
    for c, box in zip(selected, boxes):
        if (box[2] - box[0]) * (box[3] - box[1]) < 1.0:
            continue
        i = slot[(c.ref.level, c.ref.y, c.ref.x)]
        ch = select_mask_channel(T.Tensor(logits.data[i:i + 1]), c.class_id).data[0, 0]
        mask32 = T._sigmoid(ch.astype(np.float64))
        dets.append(Detection(c.class_id, c.score, np.asarray(box, dtype=np.float64), mask32, c.ref, c.anchor))
    return dets


def nms(dets: list, iou_thresh: float = 0.5) -> list:
    """Greedy per-class suppression; input order (score-descending) is kept."""
    if not dets:
        return []
    boxes = np.array([d.box for d in dets])
    classes = np.array([d.class_id for d in dets])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    for i in range(len(dets)):
        if not alive[i]:
            continue
        kill = (classes == classes[i]) & (ious[i] > iou_thresh)
        kill[: i + 1] = False
        alive &= ~kill
    return [d for d, a in zip(dets, alive) if a]


def paste_box(box, image_size) -> tuple:
    """Integer pixel extent of a float box (pixel centres inside the box)."""
    H, W = image_size
    x1 = int(np.clip(np.round(box[0]), 0, W))
    y1 = int(np.clip(np.round(box[1]), 0, H))
    x2 = int(np.clip(np.round(box[2]), 0, W))
    y2 = int(np.clip(np.round(box[3]), 0, H))
    return x1, y1, x2, y2


def paste_mask(det: Detection, image_size: tuple, threshold: float = 0.5) -> np.ndarray:
    H, W = image_size
    canvas = np.zeros((H, W), dtype=bool)
    x1, y1, x2, y2 = paste_box(det.box, image_size)
    if x2 <= x1 or y2 <= y1:
        return canvas
    resized = T.resize_bilinear(np.asarray(det.mask32, dtype=np.float64), y2 - y1, x2 - x1)
    canvas[y1:y2, x1:x2] = resized >= threshold
    return canvas


def infer_image(model: SPRModel, image: np.ndarray, k: int | None = None) -> list:
    """Full per-image pipeline; returns NMS-filtered detections."""
    cfg = model.cfg
    k = cfg.topk if k is None else k
    H, W = image.shape[:2]
    grid = model.anchor_grid(H, W)
    with T.no_grad():
        pyr = model.pyramid(image_tensor(image, model.dtype))
        cls_rows, box_rows = model.heads(pyr)
        scores = [T._sigmoid(c.data[0].astype(np.float64)) for c in cls_rows]
        boxes = [b.data[0].astype(np.float64) for b in box_rows]
        selected = top_k_pixels(scores, grid.dims, grid.num_anchors, k, cfg.score_floor)
        dets = decode_detections(model, pyr, selected, boxes, grid, (H, W))
    return nms(dets, cfg.nms_iou)


def detection_records(image_id: int, dets: list, image_size: tuple, threshold: float = 0.5) -> list:
    H, W = image_size
    out = []
    for d in dets:
        m = paste_mask(d, image_size, threshold)
        out.append({"image_id": int(image_id), "class": int(d.class_id), "score": float(d.score),
                    "box": [float(v) for v in d.box],
                    "mask_rle": {"size": [H, W], "counts": rle_encode(m)}})
    return out


def predict_dataset(model: SPRModel, scenes, workers: int = 1) -> list:
    """Detection records for every scene; images fan out over ``workers`` threads."""
    def one(sc):
        dets = infer_image(model, sc.image)
        return detection_records(sc.image_id, dets, (sc.height, sc.width), model.cfg.mask_threshold)

    with T.no_grad():  # held around the pool so threads never toggle the global flag
        if workers <= 1:
            chunks = [one(sc) for sc in scenes]
        else:
            for sc in scenes[:1]:
                model.anchor_grid(sc.height, sc.width)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                chunks = list(pool.map(one, scenes))
    return [r for c in chunks for r in c]
