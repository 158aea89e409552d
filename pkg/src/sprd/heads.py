"""Classification and box-regression towers shared across pyramid levels."""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor


@dataclass
class HeadConfig:
    width: int = 64
    depth: int = 4
    num_classes: int = 3
    num_anchors: int = 9
    prior: float = 0.01

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


def prior_bias(pi: float) -> float:
    return -math.log((1.0 - pi) / pi)


def _tower(x: Tensor, cfg: HeadConfig, store: ParamStore, prefix: str) -> Tensor:
    if x.shape[1] != cfg.width:
        raise ValueError(f"{prefix}: level width {x.shape[1]} != head width {cfg.width}")
    for i in range(cfg.depth):
        x = T.relu(T.conv2d(x, store.conv(f"{prefix}.tower{i}", cfg.width, cfg.width, 3, padding=1)))
    return x


def class_head_forward(level: Tensor, cfg: HeadConfig, store: ParamStore, prefix: str = "cls") -> Tensor:
    """Per-anchor, per-class logits ``[N, A*K, h, w]``; channel ``a*K + k``."""
    x = _tower(level, cfg, store, prefix)
    out = store.conv(f"{prefix}.out", cfg.width, cfg.num_anchors * cfg.num_classes, 3, padding=1,
                     init="normal", std=0.01, bias_value=prior_bias(cfg.prior))
    return T.conv2d(x, out)


def box_head_forward(level: Tensor, cfg: HeadConfig, store: ParamStore, prefix: str = "box") -> Tensor:
    """Per-anchor ``(tx, ty, tw, th)`` deltas ``[N, A*4, h, w]``; channel ``a*4 + j``."""
    x = _tower(level, cfg, store, prefix)
    out = store.conv(f"{prefix}.out", cfg.width, cfg.num_anchors * 4, 3, padding=1, init="normal", std=0.01)
    return T.conv2d(x, out)


def to_anchor_rows(head_out: Tensor, per_anchor: int) -> Tensor:
    """``[N, A*D, h, w]`` -> ``[N, h*w*A, D]`` in (y, x, anchor) order."""
    n, ad, h, w = head_out.shape
    x = T.transpose(head_out, (0, 2, 3, 1))
    return T.reshape(x, (n, h * w * (ad // per_anchor), per_anchor))
