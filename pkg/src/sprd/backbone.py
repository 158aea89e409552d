"""Tiny bottom-up backbone and gated top-down feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import tensor as T
from .optim import ParamStore
from .tensor import ConvParams, Tensor


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 128)
    strides: tuple = (4, 8, 16)
    pyramid_width: int = 64
    anchor_sizes: tuple = (8.0, 16.0, 32.0)

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have equal length")
        if any(w < 1 for w in self.widths) or self.pyramid_width < 1:
            raise ValueError("channel widths must be positive")
        for s in self.strides:
            if s < 2 or s & (s - 1):
                raise ValueError(f"stride {s} is not a power of two >= 2")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ValueError(f"adjacent strides must differ by exactly 2x, got {self.strides}")


@dataclass
class FeaturePyramid:
    levels: list
    strides: list
    anchor_sizes: list

    def __len__(self):
        return len(self.levels)

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]


@dataclass
class GateParams:
    """One separable conv scoring both inputs of a fusion junction."""
    depthwise: ConvParams
    pointwise: ConvParams

    def parameters(self):
        return self.depthwise.parameters() + self.pointwise.parameters()


def make_gate(store: ParamStore, name: str, width: int) -> GateParams:
    dw = store.conv(f"{name}.dw", width, width, 3, padding=1, depthwise=True, init="he")
    pw = store.conv(f"{name}.pw", width, width, 1, init="xavier")
    return GateParams(dw, pw)


def backbone_forward(image: Tensor, cfg: BackboneConfig, store: ParamStore, prefix: str = "backbone") -> list:
    """Run the stem and stages; returns one feature per configured stride."""
    n, c, h, w = image.shape
    top = cfg.strides[-1]
    if h % top or w % top:
        raise ValueError(f"input {h}x{w} must be a multiple of the largest stride {top}")
    x = image
    # stem: stride-2 convs until the first stage stride
    n_stem = int(math.log2(cfg.strides[0]))
    cin = c
    for i in range(n_stem):
        cout = cfg.widths[0] if i == n_stem - 1 else max(cfg.widths[0] // 2, 1)
        x = T.relu(T.conv2d(x, store.conv(f"{prefix}.stem{i}", cin, cout, 3, stride=2, padding=1)))
        cin = cout
    feats = []
    for si, width in enumerate(cfg.widths):
        if si > 0:
            x = T.relu(T.conv2d(x, store.conv(f"{prefix}.s{si}.down", cin, width, 3, stride=2, padding=1)))
            cin = width
        x = T.relu(T.conv2d(x, store.conv(f"{prefix}.s{si}.conv", cin, width, 3, padding=1)))
        feats.append(x)
    return feats


def lateral_project(stage_feature: Tensor, width: int, store: ParamStore, name: str) -> Tensor:
    c = stage_feature.shape[1]
    return T.conv2d(stage_feature, store.conv(name, c, width, 1, init="xavier"))


def gate_scores(x: Tensor, g: GateParams) -> Tensor:
    return T.sigmoid(T.separable_conv2d(x, g.depthwise, g.pointwise))


def gate_fuse(upper_up: Tensor, lateral: Tensor, g: Optional[GateParams], mode: str = "gfpn",
              scores: Optional[tuple] = None, hard_block: bool = False) -> Tensor:
    """Fuse the upsampled upper level with a lateral feature.

    ``gfpn``: ``a * sigmoid(sep(a)) + b * sigmoid(sep(b))`` with one shared
    separable conv ``sep``.  ``fpn``: ``a + b``.  ``scores`` lets a caller
    inject fixed score maps per branch (``None`` entries are computed).
    ``hard_block`` additionally cuts the gradient path into the upper level.
    """
    if upper_up.shape != lateral.shape:
        raise ValueError(f"gate_fuse: shape mismatch {upper_up.shape} vs {lateral.shape}")
    a, b = upper_up, lateral
    if hard_block:
        a = a.detach()
    if mode == "fpn":
        return T.add(a, b)
    if mode != "gfpn":
        raise ValueError(f"unknown fusion mode {mode!r}")
    s_a, s_b = scores if scores is not None else (None, None)
    if s_a is None:
        s_a = gate_scores(a, g)
    if s_b is None:
        s_b = gate_scores(b, g)
    return T.add(T.mul(a, s_a), T.mul(b, s_b))


def build_pyramid(stages: Sequence[Tensor], cfg: BackboneConfig, store: ParamStore, mode: str = "gfpn",
                  hard_block: bool = False, prefix: str = "fpn") -> FeaturePyramid:
    if len(stages) < 2:
        raise ValueError(f"build_pyramid needs at least 2 stages, got {len(stages)}")
    P = cfg.pyramid_width
    laterals = [lateral_project(f, P, store, f"{prefix}.lat{i}") for i, f in enumerate(stages)]
    merged = [None] * len(stages)
    merged[-1] = laterals[-1]
    for i in range(len(stages) - 2, -1, -1):
        gate = make_gate(store, f"{prefix}.gate{i}", P) if mode == "gfpn" else None
        up = T.upsample_nearest2x(merged[i + 1])
        merged[i] = gate_fuse(up, laterals[i], gate, mode, hard_block=hard_block)
    levels = [T.conv2d(m, store.conv(f"{prefix}.smooth{i}", P, P, 3, padding=1, init="xavier"))
              for i, m in enumerate(merged)]
    return FeaturePyramid(levels, list(cfg.strides), list(cfg.anchor_sizes))


def gate_parameter_count(P: int, junctions: int, k: int = 3) -> int:
    """Extra parameters the gates add over plain FPN (weights + biases)."""
    per = P * k * k + P + P * P + P
    return per * junctions
