"""Independent brute-force references, written loop-first without the library helpers."""
import math

import numpy as np


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def anchors_for_level(h, w, stride, sizes, ratios):
    out = []
    for y in range(h):
        for x in range(w):
            cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
            for s in sizes:
                for r in ratios:
                    aw, ah = s * math.sqrt(r), s / math.sqrt(r)
                    out.append((cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2))
    return out


def assign(anchors, gts, classes, pos=0.5, neg=0.4):
    """(state, matched gt, class) per anchor by exhaustive O(A*G) scan."""
    res = []
    for a in anchors:
        best, best_g = -1.0, -1
        for g, box in enumerate(gts):
            v = iou(a, box)
            if v > best:
                best, best_g = v, g
        if best_g < 0 or best < neg:
            res.append((0, -1, -1))
        elif best > pos:
            res.append((1, best_g, classes[best_g]))
        else:
            res.append((-1, -1, -1))
    return res


def positive_pixels(levels, gts, thresh=0.7, cap=300):
    """levels: list of (h, w, anchors-per-pixel list).  Returns (level, y, x, g, iou, a)."""
    found = []
    for lvl, (h, w, anchors) in enumerate(levels):
        A = len(anchors) // (h * w)
        for y in range(h):
            for x in range(w):
                best = (-1.0, None, None)
                for g, box in enumerate(gts):
                    for a in range(A):
                        v = iou(anchors[(y * w + x) * A + a], box)
                        if v > best[0]:
                            best = (v, g, a)
                if best[0] > thresh:
                    found.append((lvl, y, x, best[1], best[0], best[2]))
    order = sorted(range(len(found)), key=lambda i: (-found[i][4], i))
    return [found[i] for i in order][:cap]


def _axis_weights(n_in, n_out):
    rows = []
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        f = src - lo
        rows.append((lo, hi, f))
    return rows


def mask_target(mask, box, size=32):
    H, W = mask.shape
    x1, y1 = max(math.floor(box[0]), 0), max(math.floor(box[1]), 0)
    x2, y2 = min(math.ceil(box[2]), W), min(math.ceil(box[3]), H)
    crop = mask[y1:y2, x1:x2].astype(float)
    wy = _axis_weights(crop.shape[0], size)
    wx = _axis_weights(crop.shape[1], size)
    out = np.zeros((size, size), dtype=np.uint8)
    for i, (ylo, yhi, fy) in enumerate(wy):
        for j, (xlo, xhi, fx) in enumerate(wx):
            top = crop[ylo, xlo] * (1 - fx) + crop[ylo, xhi] * fx
            bot = crop[yhi, xlo] * (1 - fx) + crop[yhi, xhi] * fx
            out[i, j] = 1 if top * (1 - fy) + bot * fy >= 0.5 else 0
    return out


def nms(boxes, scores, classes, thr):
    """O(n^2) greedy per class over score-sorted input; returns kept indices."""
    keep = []
    for i in range(len(boxes)):
        if all(classes[j] != classes[i] or iou(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


def top_k(scores_per_level, k, floor=0.0):
    """Full sort of every (level, row, class) score tuple; ties in natural order."""
    tuples = []
    for lvl, s in enumerate(scores_per_level):
        for r in range(s.shape[0]):
            for c in range(s.shape[1]):
                if s[r, c] > floor or floor <= 0:
                    tuples.append((-s[r, c], lvl, r, c))
    tuples.sort()
    return [(lvl, r, c, -neg) for neg, lvl, r, c in tuples[:k]]


# ---------------------------------------------------------------------------
# naive COCO evaluator


THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]
RECALLS = [i / 100 for i in range(101)]
AREAS = {"all": (0, 1e10), "small": (0, 32 ** 2), "medium": (32 ** 2, 96 ** 2), "large": (96 ** 2, 1e10)}


def _mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def _pair_iou(d, g, kind):
    return iou(d["box"], g["box"]) if kind == "box" else _mask_iou(d["mask"], g["mask"])


def _match_image(dets, gts, kind, area, thr):
    """Greedy COCO matching for one image/class; returns [(score, tp, ignored)] and #non-ignored gts."""
    lo, hi = area
    g_ign = [not (lo <= g["area"] < hi) for g in gts]
    order_g = sorted(range(len(gts)), key=lambda i: (g_ign[i], i))
    used = [False] * len(gts)
    out = []
    for d in sorted(dets, key=lambda d: -d["score"])[:100]:
        best, best_g = min(thr, 1 - 1e-10), -1
        for gi in order_g:
            if used[gi]:
                continue
            if best_g >= 0 and not g_ign[best_g] and g_ign[gi]:
                break
            v = _pair_iou(d, gts[gi], kind)
            if v < best:
                continue
            best, best_g = v, gi
        if best_g >= 0:
            used[best_g] = True
            out.append((d["score"], not g_ign[best_g], g_ign[best_g]))
        else:
            d_area = d["box_area"] if kind == "box" else d["mask_area"]
            out.append((d["score"], False, not (lo <= d_area < hi)))
    return out, sum(1 for x in g_ign if not x)


def _ap(rows, n_gt):
    rows = sorted(rows, key=lambda r: -r[0])
    rows = [r for r in rows if not r[2]]
    tp = fp = 0
    prec, rec = [], []
    for _, is_tp, _ in rows:
        tp += is_tp
        fp += not is_tp
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    total = 0.0
    for r in RECALLS:
        p = 0.0
        for pi, ri in zip(prec, rec):
            if ri >= r:
                p = pi
                break
        total += p
    return total / len(RECALLS), (rec[-1] if rec else 0.0)


def naive_summary(dets, gts, kind):
    """AP (IoU-averaged), AP50, AP75 and per-area AP plus AR_100, with None when undefined."""
    classes = sorted({g["class"] for g in gts} | {d["class"] for d in dets})
    images = sorted({g["image_id"] for g in gts} | {d["image_id"] for d in dets})

    def metric(area, thresholds, max_det=100, want="ap"):
        vals = []
        for c in classes:
            per_t = []
            for thr in thresholds:
                rows, n_gt = [], 0
                for i in images:
                    di = [d for d in dets if d["image_id"] == i and d["class"] == c]
                    di = sorted(di, key=lambda d: -d["score"])[:max_det]
                    gi = [g for g in gts if g["image_id"] == i and g["class"] == c]
                    r, n = _match_image(di, gi, kind, area, thr)
                    rows += r
                    n_gt += n
                if n_gt == 0:
                    per_t = None
                    break
                ap, rc = _ap(rows, n_gt)
                per_t.append(ap if want == "ap" else rc)
            if per_t is not None:
                vals.append(per_t)
        if not vals:
            return None
        return float(np.mean(vals))

    return {
        "AP": metric(AREAS["all"], THRESHOLDS),
        "AP50": metric(AREAS["all"], [0.5]),
        "AP75": metric(AREAS["all"], [0.75]),
        "AP_S": metric(AREAS["small"], THRESHOLDS),
        "AP_M": metric(AREAS["medium"], THRESHOLDS),
        "AP_L": metric(AREAS["large"], THRESHOLDS),
        "AR_1": metric(AREAS["all"], THRESHOLDS, 1, "ar"),
        "AR_10": metric(AREAS["all"], THRESHOLDS, 10, "ar"),
        "AR_100": metric(AREAS["all"], THRESHOLDS, 100, "ar"),
        "AR_S": metric(AREAS["small"], THRESHOLDS, 100, "ar"),
        "AR_M": metric(AREAS["medium"], THRESHOLDS, 100, "ar"),
        "AR_L": metric(AREAS["large"], THRESHOLDS, 100, "ar"),
    }
