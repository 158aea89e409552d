"""Single-pixel mask reconstruction.

The encoder fuses several receptive fields into every pixel of a pyramid
level; the decoder grows one sampled pixel column into a 32x32 mask with
one channel per class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor

FUSION_KINDS = ("dilated", "consecutive", "parallel1246")
MASK_SIZE = 32


@dataclass
class FusionConfig:
    kind: str = "dilated"
    in_width: int = 64
    c1: int = 64
    cd: int = 32
    dilations: tuple = (2, 4, 6)

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}; expected one of {FUSION_KINDS}")

    @property
    def width(self) -> int:
        return self.c1 + len(self.dilations) * self.cd


@dataclass
class DecoderConfig:
    in_width: int = 160
    deconv_widths: tuple = (256, 128, 64)
    up_widths: tuple = (16, 16)
    num_classes: int = 3
    shortcut: bool = True

    def __post_init__(self):
        if len(self.deconv_widths) != 3 or len(self.up_widths) != 2:
            raise ValueError("decoder needs exactly three deconv widths and two upsample widths")


class PixelRef(NamedTuple):
    level: int
    y: int
    x: int
    batch: int = 0


class DecoderCounter:
    """Counts pixel columns pushed through the decoder."""

    def __init__(self):
        self.pixels = 0
        self.calls = 0

    def reset(self):
        self.pixels = 0
        self.calls = 0


decoder_counter = DecoderCounter()


def fuse_multiscale(level: Tensor, cfg: FusionConfig, store: ParamStore, prefix: str = "mask.fuse") -> Tensor:
    if level.shape[1] != cfg.in_width:
        raise ValueError(f"fuse_multiscale: level width {level.shape[1]} != {cfg.in_width}")
    P, out_w = cfg.in_width, cfg.width
    if cfg.kind == "dilated":
        parts = [T.relu(T.conv2d(level, store.conv(f"{prefix}.c1", P, cfg.c1, 1)))]
        for d in cfg.dilations:
            conv = store.conv(f"{prefix}.d{d}", P, cfg.cd, 3, padding=d, dilation=d)
            parts.append(T.relu(T.conv2d(level, conv)))
        return T.concat_channels(parts)
    if cfg.kind == "consecutive":
        x = level
        for i in range(4):
            cout = out_w if i == 3 else P
            x = T.relu(T.conv2d(x, store.conv(f"{prefix}.seq{i}", x.shape[1], cout, 3, padding=1)))
        return x
    # four parallel 3x3 branches at dilations 1, 2, 4, 6
    base, extra = divmod(out_w, 4)
    parts = []
    for i, d in enumerate((1, 2, 4, 6)):
        cout = base + (1 if i < extra else 0)
        conv = store.conv(f"{prefix}.p{d}", P, cout, 3, padding=d, dilation=d)
        parts.append(T.relu(T.conv2d(level, conv)))
    return T.concat_channels(parts)


def sample_pixel_feature(fused: Tensor, ref: PixelRef) -> Tensor:
    """Column ``fused[batch, :, y, x]`` as ``[1, C, 1, 1]``."""
    return T.gather_pixels(fused, [ref.batch], [ref.y], [ref.x])


def sample_pixel_features(fused: Tensor, refs) -> Tensor:
    refs = list(refs)
    return T.gather_pixels(fused, [r.batch for r in refs], [r.y for r in refs], [r.x for r in refs])


def reconstruct_mask(pixel: Tensor, cfg: DecoderConfig, store: ParamStore, prefix: str = "mask.dec",
                     trace: list | None = None) -> Tensor:
    """Decode ``[M, C, 1, 1]`` pixel columns into ``[M, K, 32, 32]`` logits.

    Three stride-2 deconvolutions without activation take 1x1 to 8x8; two
    nearest-2x + 3x3 conv stages reach 32x32; the 8x8 map, upsampled 4x and
    projected by a 1x1 conv, is optionally added before the final 1x1
    classifier.  If ``trace`` is a list, the spatial size after each stage is
    appended to it.
    """
    if pixel.ndim != 4 or pixel.shape[2:] != (1, 1):
        raise ValueError(f"reconstruct_mask expects [M, C, 1, 1], got {pixel.shape}")
    if pixel.shape[1] != cfg.in_width:
        raise ValueError(f"reconstruct_mask: pixel width {pixel.shape[1]} != decoder input {cfg.in_width}")
    decoder_counter.calls += 1
    decoder_counter.pixels += pixel.shape[0]
    if trace is not None:
        trace.append(pixel.shape[2])
    x = pixel
    cin = cfg.in_width
    for i, cout in enumerate(cfg.deconv_widths):
        x = T.conv2d_transpose(x, store.conv(f"{prefix}.deconv{i}", cin, cout, 2, stride=2,
                                             transpose=True, init="xavier"))
        cin = cout
        if trace is not None:
            trace.append(x.shape[2])
    feat8 = x
    for i, cout in enumerate(cfg.up_widths):
        x = T.upsample_nearest2x(x)
        x = T.relu(T.conv2d(x, store.conv(f"{prefix}.up{i}", cin, cout, 3, padding=1)))
        cin = cout
        if trace is not None:
            trace.append(x.shape[2])
    if cfg.shortcut:
        sc = T.upsample_nearest(feat8, 4)
        sc = T.conv2d(sc, store.conv(f"{prefix}.shortcut", feat8.shape[1], cin, 1, init="xavier"))
        x = T.add(x, sc)
    return T.conv2d(x, store.conv(f"{prefix}.out", cin, cfg.num_classes, 1, init="xavier"))


def select_mask_channel(logits: Tensor, class_id) -> Tensor:
    """Pick class channel(s): ``[M, K, 32, 32]`` -> ``[M, 1, 32, 32]``."""
    k = logits.shape[1]
    ids = np.broadcast_to(np.asarray(class_id, dtype=np.intp), (logits.shape[0],))
    if (ids < 0).any() or (ids >= k).any():
        raise ValueError(f"class id {class_id} out of range for {k} mask channels")
    return T.take_channel(logits, ids)
