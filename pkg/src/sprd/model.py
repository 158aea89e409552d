"""Whole-network assembly: backbone, pyramid, heads and mask branch."""
from __future__ import annotations


import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeaturePyramid, backbone_forward, build_pyramid
from .config import Config
from .heads import HeadConfig, box_head_forward, class_head_forward, to_anchor_rows
from .labels import AnchorGrid
from .maskbranch import DecoderConfig, FusionConfig, fuse_multiscale, reconstruct_mask
from .optim import ParamStore


class SPRModel:
    def __init__(self, cfg: Config, store: ParamStore | None = None):
        self.cfg = cfg
        dtype = np.float64 if cfg.precision == "float64" else np.float32
        self.store = store if store is not None else ParamStore(seed=cfg.seed, dtype=dtype)
        self.backbone_cfg = BackboneConfig(cfg.widths, cfg.strides, cfg.pyramid_width, cfg.anchor_sizes)
        self.head_cfg = HeadConfig(cfg.pyramid_width, cfg.head_depth, cfg.num_classes, cfg.num_anchors, cfg.prior)
        self.fusion_cfg = FusionConfig(cfg.fusion, cfg.pyramid_width, cfg.fusion_c1, cfg.fusion_cd,
                                       tuple(cfg.fusion_dilations))
        self.decoder_cfg = DecoderConfig(self.fusion_cfg.width, tuple(cfg.decoder_widths),
                                         tuple(cfg.decoder_up_widths), cfg.num_classes, cfg.shortcut)
        self._grids = {}

    @property
    def dtype(self):
        return self.store.dtype

    def build(self, image_size: int | None = None) -> "SPRModel":
        """Materialise every parameter with one dummy forward pass."""
        s = image_size or self.cfg.image_size
        with T.no_grad():
            img = T.Tensor(np.zeros((1, 3, s, s), dtype=self.dtype))
            pyr = self.pyramid(img)
            self.heads(pyr)
            fused = self.fuse(pyr.levels[0])
            self.decode(T.gather_pixels(fused, [0], [0], [0]))
        return self

    def pyramid(self, images: T.Tensor) -> FeaturePyramid:
        stages = backbone_forward(images, self.backbone_cfg, self.store)
        return build_pyramid(stages, self.backbone_cfg, self.store, self.cfg.pyramid, self.cfg.hard_block)

    def heads(self, pyr: FeaturePyramid):
        """Per-level class logits and box deltas as anchor rows ``[N, R_l, K|4]``."""
        cls, box = [], []
        for lvl in pyr.levels:
            cls.append(to_anchor_rows(class_head_forward(lvl, self.head_cfg, self.store), self.cfg.num_classes))
            box.append(to_anchor_rows(box_head_forward(lvl, self.head_cfg, self.store), 4))
        return cls, box

    def fuse(self, level: T.Tensor) -> T.Tensor:
        return fuse_multiscale(level, self.fusion_cfg, self.store)

    def decode(self, pixels: T.Tensor, trace=None) -> T.Tensor:
        return reconstruct_mask(pixels, self.decoder_cfg, self.store, trace=trace)

    def anchor_grid(self, image_h: int, image_w: int) -> AnchorGrid:
        key = (image_h, image_w)
        if key not in self._grids:
            dims = [(image_h // s, image_w // s) for s in self.cfg.strides]
            self._grids[key] = AnchorGrid.build(dims, self.cfg.strides, self.cfg.anchor_sizes,
                                                self.cfg.anchor_scales, self.cfg.anchor_ratios)
        return self._grids[key]


def image_tensor(images: np.ndarray, dtype) -> T.Tensor:
    """uint8 ``[N, H, W, 3]`` (or a single image) -> normalised ``[N, 3, H, W]``."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(np.float64).transpose(0, 3, 1, 2) / 255.0
    return T.Tensor(((x - 0.5) / 0.25).astype(dtype))
