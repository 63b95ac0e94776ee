"""The full tracker network: backbone plus fused box head."""
from __future__ import annotations

import numpy as np

from .backbone import Backbone, ModelConfig
from .head import Head, decode, fuse_and_predict, hann2d
from .nn import Module
from .tensor import make_rng

PIXEL_MEAN = 127.5
PIXEL_SCALE = 1.0 / 64.0


def normalize(images):
    """uint8-range pixels -> roughly zero-mean, unit-scale float64."""
    return (np.asarray(images, dtype=np.float64) - PIXEL_MEAN) * PIXEL_SCALE


class RGBTModel(Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = make_rng(cfg.seed)
        self.backbone = Backbone(cfg, rng)
        self.head = Head(rng, cfg.dim)

    def backbone_params(self):
        return [p for n, p in self.named_parameters() if n.startswith("backbone.")
                and not n.startswith("backbone.bridges.")]

    def other_params(self):
        keep = {id(p) for p in self.backbone_params()}
        return [p for p in self.parameters() if id(p) not in keep]

    def forward(self, rgb, tir):
        """``rgb``/``tir``: ``(static, dynamic, search)`` pixel batches (0..255)."""
        feats = self.backbone.forward(tuple(normalize(x) for x in rgb),
                                      tuple(normalize(x) for x in tir))
        return fuse_and_predict(feats.feat_rgb, feats.feat_tir, self.head), feats

    __call__ = forward

    def predict(self, rgb, tir):
        """Single-sample inference: crops without batch axis -> (box, score)."""
        out, _ = self.forward(tuple(x[None] for x in rgb), tuple(x[None] for x in tir))
        window = hann2d(self.cfg.grid) if self.cfg.hann_window else None
        return decode(out, 0, window)
