"""COCO-protocol AP/AR for boxes and masks.

Follows the reference COCO evaluation semantics without crowd handling:
greedy score-ordered matching per image and class, ground truths outside an
area range are ignored (and so are detections matched to them or, when
unmatched, lying outside the range), 101-point interpolated precision.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import rle_decode
from .labels import iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_GRID = tuple(np.round(np.linspace(0.0, 1.0, 101), 2))
AREA_RANGES = {"all": (0.0, float("inf")), "small": (0.0, 32.0 ** 2),
               "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, float("inf"))}
MAX_DETS = (1, 10, 100)


@dataclass
class EvalConfig:
    iou_thresholds: tuple = IOU_THRESHOLDS
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))
    max_dets: tuple = MAX_DETS
    recall_grid: tuple = RECALL_GRID


@dataclass
class Item:
    """One ground truth or detection as the evaluator sees it."""
    image_id: int
    class_id: int
    box: np.ndarray
    mask: np.ndarray | None
    area: float
    score: float = 1.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0  # both empty: degenerate, scored as no overlap
    return float(np.logical_and(a, b).sum() / union)


def mask_iou_matrix(a: list, b: list) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    fa = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in a]).astype(np.float64)
    fb = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in b]).astype(np.float64)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("mask_iou: masks of different sizes")
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _ious(dets: list, gts: list, kind: str) -> np.ndarray:
    if kind == "box":
        return iou_matrix(np.array([d.box for d in dets]).reshape(-1, 4), np.array([g.box for g in gts]).reshape(-1, 4))
    if kind == "mask":
        return mask_iou_matrix([d.mask for d in dets], [g.mask for g in gts])
    raise ValueError(f"unknown IoU kind {kind!r}")


def _greedy(ious: np.ndarray, thresh: float, gt_ignore: np.ndarray):
    """Score-ordered greedy matching; rows are detections, columns gts
    (already sorted so non-ignored gts come first)."""
    n_d, n_g = ious.shape
    gt_match = np.full(n_g, -1)
    dt_match = np.full(n_d, -1)
    for d in range(n_d):
        best = min(thresh, 1 - 1e-10)
        m = -1
        for g in range(n_g):
            if gt_match[g] >= 0:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m >= 0:
            dt_match[d] = m
            gt_match[m] = d
    return dt_match


def match_detections(dets: list, gts: list, iou_thresh: float, kind: str = "box") -> np.ndarray:
    """TP flags for score-sorted detections of one image (class-aware)."""
    tp = np.zeros(len(dets), dtype=bool)
    for c in sorted({d.class_id for d in dets}):
        di = [i for i, d in enumerate(dets) if d.class_id == c]
        gi = [g for g in gts if g.class_id == c]
        if not gi:
            continue
        ious = _ious([dets[i] for i in di], gi, kind)
        dm = _greedy(ious, iou_thresh, np.zeros(len(gi), dtype=bool))
        for j, i in enumerate(di):
            tp[i] = dm[j] >= 0
    return tp


def average_precision(tp: np.ndarray, num_gts: int, recall_grid=RECALL_GRID) -> float:
    """101-point interpolated AP from TP flags in descending score order."""
    if num_gts == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=bool)
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    rc = tps / num_gts
    pr = tps / (tps + fps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, recall_grid, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(q.mean())


def _evaluate_image(dets: list, gts: list, kind: str, area: tuple, max_det: int, thresholds) -> dict:
    lo, hi = area
    g_ign = np.array([not (lo <= g.area < hi) for g in gts], dtype=bool)
    g_order = np.argsort(g_ign, kind="stable")
    gts = [gts[i] for i in g_order]
    g_ign = g_ign[g_order]
    dets = dets[:max_det]
    d_area_out = np.array([not (lo <= d.area < hi) for d in dets], dtype=bool)
    ious = _ious(dets, gts, kind) if dets and gts else np.zeros((len(dets), len(gts)))
    T = len(thresholds)
    tp = np.zeros((T, len(dets)), dtype=bool)
    ign = np.zeros((T, len(dets)), dtype=bool)
    for t, thr in enumerate(thresholds):
        dm = _greedy(ious, thr, g_ign)
        matched = dm >= 0
        hit_ign = np.append(g_ign, False)[dm]  # dm == -1 picks the padded False
        tp[t] = matched & ~hit_ign
        ign[t] = np.where(matched, hit_ign, d_area_out)
    return {"scores": np.array([d.score for d in dets]), "tp": tp, "ignore": ign,
            "num_gt": int((~g_ign).sum())}


@dataclass
class EvalResult:
    box: dict
    mask: dict

    def to_json(self) -> str:
        return json.dumps({"box": self.box, "mask": self.mask}, sort_keys=True, indent=2)


METRIC_NAMES = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR_1", "AR_10", "AR_100", "AR_S", "AR_M", "AR_L")


def accumulate(dets: list, gts: list, kind: str, cfg: EvalConfig | None = None):
    """Precision ``[T, R, K, A, M]`` and recall ``[T, K, A, M]`` arrays (-1 = undefined)."""
    cfg = cfg or EvalConfig()
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    images = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    areas = list(cfg.area_ranges.values())
    T, R, K, A, M = len(cfg.iou_thresholds), len(cfg.recall_grid), len(classes), len(areas), len(cfg.max_dets)
    precision = -np.ones((T, R, K, A, M))
    recall = -np.ones((T, K, A, M))
    by_key = {}
    for d in dets:
        by_key.setdefault((d.image_id, d.class_id), ([], []))[0].append(d)
    for g in gts:
        by_key.setdefault((g.image_id, g.class_id), ([], []))[1].append(g)
    for key, (dl, gl) in by_key.items():
        order = np.argsort([-d.score for d in dl], kind="stable")
        by_key[key] = ([dl[i] for i in order], gl)
    recall_grid = np.asarray(cfg.recall_grid)
    for k, c in enumerate(classes):
        for a, area in enumerate(areas):
            per_img = [_evaluate_image(*by_key.get((i, c), ([], [])), kind, area, max(cfg.max_dets),
                                       cfg.iou_thresholds) for i in images]
            for m, md in enumerate(cfg.max_dets):
                num_gt = sum(e["num_gt"] for e in per_img)
                if num_gt == 0:
                    continue
                scores = np.concatenate([e["scores"][:md] for e in per_img])
                tp = np.concatenate([e["tp"][:, :md] for e in per_img], axis=1)
                ign = np.concatenate([e["ignore"][:, :md] for e in per_img], axis=1)
                order = np.argsort(-scores, kind="mergesort")
                for t in range(T):
                    keep = ~ign[t, order]
                    flags = tp[t, order][keep]
                    tps = np.cumsum(flags)
                    fps = np.cumsum(~flags)
                    if len(flags) == 0:
                        recall[t, k, a, m] = 0.0
                        precision[t, :, k, a, m] = 0.0
                        continue
                    rc = tps / num_gt
                    pr = tps / (tps + fps)
                    recall[t, k, a, m] = rc[-1]
                    pr = np.maximum.accumulate(pr[::-1])[::-1]
                    idx = np.searchsorted(rc, recall_grid, side="left")
                    precision[t, :, k, a, m] = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return precision, recall, classes


def _mean(arr) -> float | None:
    v = arr[arr > -1]
    return float(v.mean()) if v.size else None


def summarize_arrays(precision, recall, cfg: EvalConfig | None = None) -> dict:
    cfg = cfg or EvalConfig()
    thr = list(np.round(cfg.iou_thresholds, 2))
    names = list(cfg.area_ranges)
    a_all, a_s, a_m, a_l = (names.index(n) for n in ("all", "small", "medium", "large"))
    m100 = len(cfg.max_dets) - 1

    def ap(area, t=None):
        p = precision[:, :, :, area, m100]
        if t is not None:
            p = p[thr.index(t)]
        return _mean(p)

    def ar(area, m):
        return _mean(recall[:, :, area, m])

    return {
        "AP": ap(a_all), "AP50": ap(a_all, 0.5), "AP75": ap(a_all, 0.75),
        "AP_S": ap(a_s), "AP_M": ap(a_m), "AP_L": ap(a_l),
        "AR_1": ar(a_all, 0), "AR_10": ar(a_all, 1), "AR_100": ar(a_all, m100),
        "AR_S": ar(a_s, m100), "AR_M": ar(a_m, m100), "AR_L": ar(a_l, m100),
    }


def summarize(dets: list, gts: list, cfg: EvalConfig | None = None) -> EvalResult:
    """Box and mask metrics for detection and ground-truth :class:`Item` lists."""
    out = {}
    for kind in ("box", "mask"):
        precision, recall, _ = accumulate(_set_areas(dets, kind), gts, kind, cfg)
        out[kind] = summarize_arrays(precision, recall, cfg)
    return EvalResult(out["box"], out["mask"])


# ---------------------------------------------------------------------------
# file interfaces


def _box_area(b) -> float:
    return float(max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0))


def items_from_annotations(ann: dict) -> list:
    out = []
    for k, inst in enumerate(ann["instances"]):
        rle = inst["mask_rle"]
        mask = rle_decode(rle["counts"], *rle["size"], where=f"instances[{k}]")
        area = float(inst.get("area", mask.sum()))
        out.append(Item(int(inst["image_id"]), int(inst["class"]), np.asarray(inst["box"], float), mask, area))
    return out


def items_from_detections(records: list) -> list:
    out = []
    for k, r in enumerate(records):
        rle = r["mask_rle"]
        mask = rle_decode(rle["counts"], *rle["size"], where=f"detections[{k}]")
        box = np.asarray(r["box"], float)
        out.append(Item(int(r["image_id"]), int(r["class"]), box, mask, 0.0, float(r["score"])))
    return out


def items_from_scenes(scenes) -> list:
    return [Item(sc.image_id, inst.class_id, np.asarray(inst.box, float), inst.mask, float(inst.area))
            for sc in scenes for inst in sc.instances]


def _set_areas(dets: list, kind: str) -> list:
    # detections use box area for box AP and mask area for mask AP
    return [Item(d.image_id, d.class_id, d.box, d.mask,
                 _box_area(d.box) if kind == "box" else float(np.asarray(d.mask).sum()), d.score) for d in dets]


def evaluate(det_records: list, gt_items: list, cfg: EvalConfig | None = None):
    dets = items_from_detections(det_records)
    out, arrays = {}, {}
    for kind in ("box", "mask"):
        p, r, classes = accumulate(_set_areas(dets, kind), gt_items, kind, cfg)
        out[kind] = summarize_arrays(p, r, cfg)
        arrays[kind] = (p, classes)
    return EvalResult(out["box"], out["mask"]), arrays


def write_pr_csv(path, arrays: dict, cfg: EvalConfig | None = None) -> None:
    cfg = cfg or EvalConfig()
    a_all = list(cfg.area_ranges).index("all")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "class", "iou", "recall", "precision"])
        for kind, (p, classes) in arrays.items():
            for k, c in enumerate(classes):
                for t, thr in enumerate(cfg.iou_thresholds):
                    for r, rec in enumerate(cfg.recall_grid):
                        w.writerow([kind, c, f"{thr:.2f}", f"{rec:.2f}", f"{p[t, r, k, a_all, -1]:.6f}"])
