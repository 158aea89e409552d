"""Synthetic shape scenes, run-length masks, PPM/PGM IO and dataset folders."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import box_iou

log = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "rectangle", "triangle")
SUPERSAMPLE = 4


def worker_count() -> int:
    try:
        n = int(os.environ.get("SPRD_THREADS", "0"))
    except ValueError:
        n = 0
    return max(1, n or (os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# run-length encoding


def rle_encode(mask: np.ndarray) -> list:
    """Row-major alternating run lengths, starting with a (possibly empty) zero run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts, height: int, width: int, where: str = "mask") -> np.ndarray:
    counts = list(counts)
    if any((not isinstance(c, (int, np.integer))) or c < 0 for c in counts):
        raise ValueError(f"{where}: RLE counts must be non-negative integers")
    if sum(counts) != height * width:
        raise ValueError(f"{where}: RLE covers {sum(counts)} pixels, image has {height * width}")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, counts).reshape(height, width)


def mask_box(mask: np.ndarray) -> tuple:
    """Tight bounding box ``(x1, y1, x2, y2)`` with exclusive max corner."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# ---------------------------------------------------------------------------
# netpbm


def write_pnm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise ValueError(f"cannot write image of shape {img.shape} as PPM/PGM")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM/PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 files are supported")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    body = raw[pos:pos + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneSpec:
    seed: int = 7
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 3
    size_range: tuple = (16, 64)
    overlap: float = 0.15        # max box IoU between two instances
    min_visible: float = 0.6     # fraction of a shape that must stay unoccluded
    noise: float = 10.0
    max_tries: int = 100

    def __post_init__(self):
        lo, hi = self.size_range
        if not 0 < lo <= hi <= self.image_size:
            raise ValueError(f"size_range {self.size_range} must satisfy 0 < lo <= hi <= image_size {self.image_size}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")


@dataclass
class Instance:
    class_id: int
    box: tuple
    mask: np.ndarray = field(repr=False)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Scene:
    image_id: int
    image: np.ndarray = field(repr=False)
    instances: list

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def _inside(kind: int, params: tuple, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    if kind == 0:
        cx, cy, r = params
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == 1:
        x1, y1, x2, y2 = params
        return (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    (ax, ay), (bx, by), (qx, qy) = params
    d1 = (px - bx) * (ay - by) - (ax - bx) * (py - by)
    d2 = (px - qx) * (by - qy) - (bx - qx) * (py - qy)
    d3 = (px - ax) * (qy - ay) - (qx - ax) * (py - ay)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _random_shape(rng: np.random.Generator, spec: SceneSpec):
    kind = int(rng.integers(len(CLASS_NAMES)))
    lo, hi = spec.size_range
    S = spec.image_size
    if kind == 0:
        r = rng.uniform(lo, hi) / 2
        cx, cy = rng.uniform(r, S - r, size=2)
        return kind, (cx, cy, r)
    w, h = rng.uniform(lo, hi, size=2)
    x1 = rng.uniform(0, S - w)
    y1 = rng.uniform(0, S - h)
    if kind == 1:
        return kind, (x1, y1, x1 + w, y1 + h)
    # isosceles triangle with its apex pointing up, down, left or right
    x2, y2 = x1 + w, y1 + h
    orient = int(rng.integers(4))
    pts = {
        0: ((x1 + w / 2, y1), (x2, y2), (x1, y2)),
        1: ((x1 + w / 2, y2), (x1, y1), (x2, y1)),
        2: ((x1, y1 + h / 2), (x2, y1), (x2, y2)),
        3: ((x2, y1 + h / 2), (x1, y2), (x1, y1)),
    }[orient]
    return kind, pts


def _rasterize(kind, params, size):
    """Exact pixel-centre mask and supersampled coverage."""
    c = np.arange(size) + 0.5
    px, py = np.meshgrid(c, c)
    mask = _inside(kind, params, px, py)
    sub = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    sx, sy = np.meshgrid(sub, sub)
    cover = _inside(kind, params, sx, sy).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return mask, cover


def synth_scene(spec: SceneSpec, index: int) -> Scene:
    rng = np.random.default_rng([spec.seed, index])
    S = spec.image_size
    bg = rng.uniform(60, 190, size=3)
    canvas = np.broadcast_to(bg, (S, S, 3)).astype(np.float64).copy()
    want = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed = []  # (kind, mask, cover, color)
    tries = 0
    while len(placed) < want and tries < spec.max_tries:
        tries += 1
        kind, params = _random_shape(rng, spec)
        mask, cover = _rasterize(kind, params, S)
        if mask.sum() < 16:
            continue
        box = mask_box(mask)
        ok = True
        for _, m, _, _ in placed:
            if box_iou(box, mask_box(m)) > spec.overlap:
                ok = False
                break
            vis = (m & ~mask).sum() / m.sum()
            if vis < spec.min_visible:
                ok = False
                break
        if not ok:
            continue
        while True:
            color = rng.uniform(0, 255, size=3)
            if np.abs(color - bg).sum() > 120:
                break
        placed.append((kind, mask, cover, color))
    if len(placed) < want:
        log.info("scene %d: placed %d of %d instances after %d tries", index, len(placed), want, tries)
    occluded = np.zeros((S, S), dtype=bool)
    visible = []
    for kind, mask, cover, color in reversed(placed):
        visible.append((kind, mask & ~occluded))
        occluded |= mask
    visible.reverse()
    for kind, mask, cover, color in placed:
        canvas = canvas * (1 - cover[..., None]) + color * cover[..., None]
    canvas += rng.normal(0, spec.noise, size=canvas.shape)
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    instances = [Instance(k, mask_box(m), m) for k, m in visible if m.any()]
    return Scene(index, image, instances)


def generate_scenes(spec: SceneSpec, count: int, start: int = 0) -> list:
    idx = range(start, start + count)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda i: synth_scene(spec, i), idx))


# ---------------------------------------------------------------------------
# dataset folders


def annotations_json(scenes, categories=CLASS_NAMES) -> dict:
    images, instances = [], []
    for sc in scenes:
        images.append({"id": sc.image_id, "file_name": f"images/{sc.image_id:06d}.ppm",
                       "height": sc.height, "width": sc.width})
        for inst in sc.instances:
            instances.append({
                "id": len(instances), "image_id": sc.image_id, "class": inst.class_id,
                "box": [float(v) for v in inst.box], "area": inst.area,
                "mask_rle": {"size": [sc.height, sc.width], "counts": rle_encode(inst.mask)},
            })
    return {"categories": [{"id": i, "name": n} for i, n in enumerate(categories)],
            "images": images, "instances": instances}


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def write_dataset(path, scenes) -> Path:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    ann = annotations_json(scenes)
    for sc, rec in zip(scenes, ann["images"]):
        write_pnm(path / rec["file_name"], sc.image)
    (path / "annotations.json").write_text(dumps(ann))
    return path


def scenes_from_annotations(ann: dict, images: dict) -> list:
    """Rebuild scenes from an annotation dict and ``{image_id: array}``."""
    by_image = {rec["id"]: [] for rec in ann["images"]}
    for k, inst in enumerate(ann["instances"]):
        where = f"instances[{k}]"
        try:
            rle = inst["mask_rle"]
            h, w = rle["size"]
            mask = rle_decode(rle["counts"], h, w, where)
            iid = inst["image_id"]
            box = tuple(float(v) for v in inst["box"])
            cls = int(inst["class"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{where}: malformed instance ({e})") from None
        if iid not in by_image:
            raise ValueError(f"{where}: unknown image_id {iid}")
        by_image[iid].append(Instance(cls, box, mask))
    return [Scene(rec["id"], images[rec["id"]], by_image[rec["id"]]) for rec in ann["images"]]


def read_dataset(path) -> list:
    path = Path(path)
    ann_path = path / "annotations.json"
    try:
        ann = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{ann_path}: malformed JSON at line {e.lineno} column {e.colno}") from None
    images = {rec["id"]: read_pnm(path / rec["file_name"]) for rec in ann["images"]}
    return scenes_from_annotations(ann, images)


def dataset_digest(scenes) -> str:
    h = hashlib.sha256()
    h.update(dumps(annotations_json(scenes)).encode())
    for sc in scenes:
        h.update(sc.image.tobytes())
    return h.hexdigest()
