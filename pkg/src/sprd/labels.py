"""Anchors, IoU, delta coding and training-target preparation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .maskbranch import MASK_SIZE, PixelRef
from .tensor import resize_bilinear

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
# exp() guard for decoded widths/heights
DELTA_CLAMP = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)


def anchor_shapes(sizes: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """``[A, 2]`` (w, h) per anchor, index ``size_i * len(ratios) + ratio_j``."""
    if len(sizes) == 0 or len(ratios) == 0:
        raise ValueError("anchor sizes and ratios must be non-empty")
    return np.array([(s * math.sqrt(r), s / math.sqrt(r)) for s in sizes for r in ratios])


def generate_anchors(h: int, w: int, stride: float, sizes: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Anchors of one level as ``[h*w*A, 4]`` boxes in (y, x, anchor) order."""
    wh = anchor_shapes(sizes, ratios)
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    ctr = np.stack([cxx, cyy], axis=-1)[:, :, None, :]  # h, w, 1, 2
    half = wh[None, None] / 2.0
    boxes = np.concatenate([ctr - half, ctr + half], axis=-1)  # h, w, A, 4
    return boxes.reshape(-1, 4)


@dataclass
class AnchorGrid:
    levels: list          # per level [h*w*A, 4]
    dims: list            # per level (h, w)
    strides: list
    num_anchors: int

    @classmethod
    def build(cls, dims, strides, base_sizes, scales, ratios) -> "AnchorGrid":
        levels = []
        for (h, w), s, base in zip(dims, strides, base_sizes):
            levels.append(generate_anchors(h, w, s, [base * sc for sc in scales], ratios))
        return cls(levels, [tuple(d) for d in dims], list(strides), len(scales) * len(ratios))

    @property
    def boxes(self) -> np.ndarray:
        return np.concatenate(self.levels, axis=0)

    @property
    def offsets(self) -> list:
        return list(np.cumsum([0] + [len(l) for l in self.levels]))

    def __len__(self):
        return int(sum(len(l) for l in self.levels))

    def locate(self, flat_index: int) -> tuple:
        """Flat anchor index -> (level, y, x, anchor)."""
        offs = self.offsets
        lvl = int(np.searchsorted(offs, flat_index, side="right") - 1)
        local = flat_index - offs[lvl]
        h, w = self.dims[lvl]
        a = local % self.num_anchors
        pix = local // self.num_anchors
        return lvl, pix // w, pix % w, a


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, ``[len(a), len(b)]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def encode_deltas(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    wa, ha = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    wg, hg = gts[..., 2] - gts[..., 0], gts[..., 3] - gts[..., 1]
    if np.any(wa <= 0) or np.any(ha <= 0) or np.any(wg <= 0) or np.any(hg <= 0):
        raise ValueError("encode_deltas needs positive-area boxes")
    cxa, cya = anchors[..., 0] + wa / 2, anchors[..., 1] + ha / 2
    cxg, cyg = gts[..., 0] + wg / 2, gts[..., 1] + hg / 2
    return np.stack([(cxg - cxa) / wa, (cyg - cya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=-1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, image_size=None, return_flags: bool = False):
    """Inverse of :func:`encode_deltas`.

    With ``image_size=(h, w)`` boxes are clamped to the image; the optional
    flag array marks boxes that were clamped or collapsed.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    wa, ha = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    cxa, cya = anchors[..., 0] + wa / 2, anchors[..., 1] + ha / 2
    tw = np.minimum(deltas[..., 2], DELTA_CLAMP)
    th = np.minimum(deltas[..., 3], DELTA_CLAMP)
    cx, cy = cxa + deltas[..., 0] * wa, cya + deltas[..., 1] * ha
    w, h = wa * np.exp(tw), ha * np.exp(th)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    flags = np.zeros(boxes.shape[:-1], dtype=bool)
    if image_size is not None:
        H, W = image_size
        clamped = boxes.copy()
        clamped[..., 0::2] = np.clip(boxes[..., 0::2], 0, W)
        clamped[..., 1::2] = np.clip(boxes[..., 1::2], 0, H)
        flags = np.any(clamped != boxes, axis=-1)
        flags |= (clamped[..., 2] <= clamped[..., 0]) | (clamped[..., 3] <= clamped[..., 1])
        boxes = clamped
    return (boxes, flags) if return_flags else boxes


@dataclass
class BoxLabels:
    state: np.ndarray      # per anchor POSITIVE / NEGATIVE / IGNORE
    matched: np.ndarray    # gt index for positives, -1 otherwise
    max_iou: np.ndarray
    classes: np.ndarray    # gt class for positives, -1 otherwise
    deltas: np.ndarray     # [A, 4] regression target (zeros off positives)

    @property
    def num_positive(self) -> int:
        return int((self.state == POSITIVE).sum())

    @property
    def positive_index(self) -> np.ndarray:
        return np.flatnonzero(self.state == POSITIVE)


def assign_box_labels(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                      pos_thresh: float = 0.5, neg_thresh: float = 0.4) -> BoxLabels:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = len(anchors)
    state = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    classes = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if len(gt_boxes) == 0:
        return BoxLabels(state, matched, np.zeros(n), classes, deltas)
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.argmax(axis=1)  # first max -> lowest gt index on ties
    max_iou = ious[np.arange(n), best]
    pos = max_iou > pos_thresh
    state[(max_iou >= neg_thresh) & ~pos] = IGNORE
    state[pos] = POSITIVE
    matched[pos] = best[pos]
    classes[pos] = gt_classes[best[pos]]
    if pos.any():
        deltas[pos] = encode_deltas(anchors[pos], gt_boxes[best[pos]])
    return BoxLabels(state, matched, max_iou, classes, deltas)


@dataclass
class MaskTarget:
    ref: PixelRef
    gt_index: int
    iou: float
    anchor: int
    grid: np.ndarray = field(repr=False)


def select_positive_pixels(grid: AnchorGrid, gt_boxes: np.ndarray, iou_thresh: float = 0.7,
                           cap: int = 300, batch: int = 0) -> list:
    """Pixels with any anchor above ``iou_thresh``, best-first, at most ``cap``.

    Returns ``(PixelRef, gt_index, iou, anchor_index)`` tuples; grids are
    attached separately by :func:`build_mask_targets`.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    G, A = len(gt_boxes), grid.num_anchors
    if G == 0:
        return []
    found = []
    for lvl, (boxes, (h, w)) in enumerate(zip(grid.levels, grid.dims)):
        ious = iou_matrix(boxes, gt_boxes).reshape(h * w, A, G)
        # gt-major flattening so argmax ties go to the lowest gt, then anchor
        flat = ious.transpose(0, 2, 1).reshape(h * w, G * A)
        arg = flat.argmax(axis=1)
        best = flat[np.arange(h * w), arg]
        for pix in np.flatnonzero(best > iou_thresh):
            g, a = divmod(int(arg[pix]), A)
            found.append((PixelRef(lvl, int(pix // w), int(pix % w), batch), g, float(best[pix]), a))
    # stable sort keeps (level, y, x) order among equal IoUs
    found.sort(key=lambda t: -t[2])
    return found[:cap]


def make_mask_target(mask: np.ndarray, box, size: int = MASK_SIZE) -> np.ndarray:
    """Crop a full-resolution binary mask to ``box`` and resize to ``size x size``."""
    mask = np.asarray(mask)
    H, W = mask.shape
    x1, y1 = max(int(math.floor(box[0])), 0), max(int(math.floor(box[1])), 0)
    x2, y2 = min(int(math.ceil(box[2])), W), min(int(math.ceil(box[3])), H)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"empty crop for box {tuple(box)} in mask of shape {mask.shape}")
    crop = mask[y1:y2, x1:x2].astype(np.float64)
    return (resize_bilinear(crop, size, size) >= 0.5).astype(np.uint8)


def build_mask_targets(grid: AnchorGrid, gt_boxes, gt_masks, iou_thresh: float = 0.7,
                       cap: int = 300, batch: int = 0) -> list:
    picks = select_positive_pixels(grid, gt_boxes, iou_thresh, cap, batch)
    cache = {}
    out = []
    for ref, g, iou, a in picks:
        if g not in cache:
            cache[g] = make_mask_target(gt_masks[g], gt_boxes[g])
        out.append(MaskTarget(ref, g, iou, a, cache[g]))
    return out
