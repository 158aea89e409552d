"""Focal, smooth-L1 and on-class mask BCE losses as fused tape ops."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make, _sigmoid
from .maskbranch import select_mask_channel


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 1 / 9
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_mask: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0 or self.beta <= 0:
            raise ValueError("need gamma >= 0 and beta > 0")
        if min(self.w_cls, self.w_reg, self.w_mask) < 0:
            raise ValueError("loss weights must be non-negative")


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def focal_loss(logits: Tensor, classes: np.ndarray, valid: np.ndarray | None = None, alpha: float = 0.25,
               gamma: float = 2.0, normalizer: float | None = None) -> Tensor:
    """Sigmoid focal loss over ``[R, K]`` logits.

    ``classes[r]`` is the target class of row ``r`` or ``-1`` for background;
    rows with ``valid[r] == False`` (ignored anchors) contribute nothing.
    The sum is divided by ``normalizer`` (default: max(1, #positive rows)).
    """
    x = logits.data
    R, K = x.shape
    classes = np.asarray(classes).reshape(-1)
    valid = np.ones(R, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    if normalizer is None:
        normalizer = max(1, int(((classes >= 0) & valid).sum()))
    t = np.zeros_like(x)
    rows = np.flatnonzero((classes >= 0) & valid)
    t[rows, classes[rows]] = 1.0
    w = valid[:, None].astype(x.dtype)
    p = _sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    pos_term = -alpha * (1 - p) ** gamma * log_p
    neg_term = -(1 - alpha) * p ** gamma * log_q
    loss = (w * np.where(t > 0, pos_term, neg_term)).sum() / normalizer

    def backward(g):
        d_pos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        d_neg = -(1 - alpha) * p ** gamma * (gamma * (1 - p) * log_q - p)
        return (g * w * np.where(t > 0, d_pos, d_neg) / normalizer,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def smooth_l1_loss(pred: Tensor, target: np.ndarray, beta: float = 1 / 9,
                   normalizer: float | None = None) -> Tensor:
    x = pred.data
    d = x - np.asarray(target, dtype=x.dtype)
    if normalizer is None:
        normalizer = max(1, x.shape[0])
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / normalizer

    def backward(g):
        return (g * np.where(small, d / beta, np.sign(d)) / normalizer,)

    return _make(np.asarray(loss, dtype=x.dtype), (pred,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray, normalizer: float | None = None) -> Tensor:
    x = logits.data
    t = np.asarray(target, dtype=x.dtype).reshape(x.shape)
    if normalizer is None:
        normalizer = max(1, x.size)
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / normalizer

    def backward(g):
        return (g * (_sigmoid(x) - t) / normalizer,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def mask_bce_loss(logits: Tensor | None, targets: np.ndarray, class_ids) -> Tensor:
    """Binary cross-entropy on each sample's ground-truth class channel only."""
    class_ids = np.asarray(class_ids, dtype=np.intp).reshape(-1)
    if logits is None or len(class_ids) == 0:
        return T.tensor(0.0)
    on_class = select_mask_channel(logits, class_ids)
    return bce_with_logits(on_class, np.asarray(targets).reshape(on_class.shape))


def total_loss(parts: dict, cfg: LossConfig) -> Tensor:
    for name, part in parts.items():
        if not np.all(np.isfinite(part.data)):
            raise FloatingPointError(f"loss part {name} is not finite ({part.data})")
    weights = {"cls": cfg.w_cls, "reg": cfg.w_reg, "mask": cfg.w_mask}
    total = None
    for name, part in parts.items():
        term = T.scale(part, weights[name])
        total = term if total is None else T.add(total, term)
    return total


def focal_scalar(p: float, positive: bool, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Reference value of the per-element focal term for a single probability."""
    if positive:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p ** gamma * math.log(1 - p)
