"""Run configuration as a flat ``key = value`` text file.

Every architectural and training default lives in :class:`Config`, so a run
is reproducible from the config text, the seed, and the dataset digest.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

# keys that change the parameter set or the forward pass; a checkpoint is
# only loadable into a run whose model digest matches
MODEL_KEYS = (
    "num_classes", "widths", "strides", "pyramid_width", "pyramid", "hard_block",
    "anchor_sizes", "anchor_scales", "anchor_ratios", "head_depth", "prior",
    "fusion", "fusion_c1", "fusion_cd", "fusion_dilations", "decoder_widths",
    "decoder_up_widths", "shortcut",
)


@dataclass
class Config:
    seed: int = 0
    precision: str = "float32"
    num_classes: int = 3
    image_size: int = 128

    # backbone + pyramid
    widths: tuple = (32, 64, 128)
    strides: tuple = (4, 8, 16)
    pyramid_width: int = 64
    pyramid: str = "gfpn"
    hard_block: bool = False

    # anchors: per-level base size times each scale, for each w/h ratio
    anchor_sizes: tuple = (16.0, 32.0, 64.0)
    anchor_scales: tuple = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)

    # detection heads
    head_depth: int = 4
    prior: float = 0.01

    # mask branch
    fusion: str = "dilated"
    fusion_c1: int = 64
    fusion_cd: int = 32
    fusion_dilations: tuple = (2, 4, 6)
    decoder_widths: tuple = (256, 128, 64)
    decoder_up_widths: tuple = (16, 16)
    shortcut: bool = True

    # label assignment
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    mask_iou_thresh: float = 0.7
    mask_cap: int = 300

    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1 / 9
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_mask: float = 1.0

    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1e-3
    steps: int = 2000
    batch_size: int = 1

    # inference
    topk: int = 100
    score_floor: float = 0.05
    nms_iou: float = 0.5
    mask_threshold: float = 0.5

    def __post_init__(self):
        checks = [
            (self.precision in ("float32", "float64"), f"precision must be float32 or float64, got {self.precision!r}"),
            (self.pyramid in ("gfpn", "fpn"), f"pyramid must be gfpn or fpn, got {self.pyramid!r}"),
            (self.fusion in ("dilated", "consecutive", "parallel1246"), f"unknown fusion {self.fusion!r}"),
            (self.num_classes >= 1, "num_classes must be >= 1"),
            (len(self.widths) == len(self.strides) == len(self.anchor_sizes),
             "widths, strides and anchor_sizes need one entry per pyramid level"),
            (0.0 < self.mask_iou_thresh < 1.0, "mask_iou_thresh must lie in (0, 1)"),
            (0.0 <= self.neg_iou <= self.pos_iou <= 1.0, "need 0 <= neg_iou <= pos_iou <= 1"),
            (self.steps >= 0 and self.batch_size >= 1 and self.topk >= 1, "steps, batch_size and topk out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"config: {msg}")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def fused_width(self) -> int:
        return self.fusion_c1 + len(self.fusion_dilations) * self.fusion_cd

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kw[key] = _parse(value, known[key].default)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def model_digest(self) -> str:
        text = "\n".join(f"{k}={_fmt(getattr(self, k))}" for k in MODEL_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("true", "on", "1", "yes"):
            return True
        if text.lower() in ("false", "off", "0", "no"):
            return False
        raise ValueError(f"bad boolean {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = default[0] if default else 0.0
        if isinstance(elem, int) and not isinstance(elem, bool):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    return text


def micro_config(**kw) -> Config:
    """Tiny widths for gradient checks and fast unit tests."""
    base = Config(
        num_classes=2, image_size=32, widths=(3, 4), strides=(8, 16), pyramid_width=4,
        anchor_sizes=(10.0, 20.0), anchor_scales=(1.0,), anchor_ratios=(0.5, 1.0, 2.0),
        head_depth=1, fusion_c1=2, fusion_cd=2, fusion_dilations=(2, 4, 6),
        decoder_widths=(4, 3, 2), decoder_up_widths=(2, 2), precision="float64",
    )
    return base.replace(**kw)

