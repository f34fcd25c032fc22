"""Multi-scale feature extractor with per-pixel scale attention fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layers import Conv, ConvBNReLU, Module
from .tensor import Tensor, concat

STRIDES = (4, 8, 16, 32)


@dataclass
class PyramidFeatures:
    levels: list  # four tensors at strides 4, 8, 16, 32


@dataclass
class FusedFeatureMap:
    features: Tensor      # [N, H/4, W/4, C]
    weights: Tensor       # [N, H/4, W/4, 4], softmax over the scale axis
    upsampled: list       # the four block outputs at stride 4


class Backbone(Module):
    """Five stride-2 stages of two conv+BN+ReLU layers each.

    The first stage is a stem at stride 2; the remaining four produce the
    pyramid levels at strides 4, 8, 16 and 32.
    """

    def __init__(self, rng, stem_width: int = 16, widths=(32, 64, 96, 128), dtype=np.float32):
        chans = [3, stem_width, *widths]
        self.stages = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.stages.append(ConvBNReLU(rng, 3, cin, cout, stride=2, dtype=dtype))
            self.stages.append(ConvBNReLU(rng, 3, cout, cout, stride=1, dtype=dtype))
        self.widths = tuple(widths)

    def extract_pyramid(self, image: Tensor) -> PyramidFeatures:
        n, h, w, c = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image dims {h}x{w} must be multiples of 32; pad first")
        if c != 3:
            raise ValueError(f"expected 3 channels, got {c}")
        x = image
        levels = []
        for k, layer in enumerate(self.stages):
            x = layer(x)
            if k >= 3 and k % 2 == 1:
                levels.append(x)
        return PyramidFeatures(levels)

    __call__ = extract_pyramid


class ScaleFusion(Module):
    """Conv-Block per level, upsample to stride 4, softmax-weighted sum over scales."""

    def __init__(self, rng, widths=(32, 64, 96, 128), mid: int = 64, out: int = 128, dtype=np.float32):
        self.blocks_a = [Conv(rng, 3, cin, mid, dtype=dtype) for cin in widths]
        self.blocks_b = [Conv(rng, 1, mid, out, dtype=dtype) for _ in widths]
        self.fuse = Conv(rng, 1, 4 * out, 4, dtype=dtype)
        self.out_channels = out

    def fuse_scales(self, pyr: PyramidFeatures) -> FusedFeatureMap:
        if len(pyr.levels) != 4:
            raise ValueError("scale fusion needs exactly 4 pyramid levels")
        base = pyr.levels[0].shape[1:3]
        ups = []
        for k, feat in enumerate(pyr.levels):
            y = self.blocks_b[k](self.blocks_a[k](feat).relu()).relu()
            y = F.upsample_bilinear(y, 2 ** k)
            if y.shape[1:3] != base:
                raise ValueError(f"level {k} upsampled to {y.shape[1:3]}, expected {base}")
            ups.append(y)
        logits = self.fuse(concat(ups, axis=-1))
        weights = F.softmax(logits, axis=-1)
        fused = None
        for k, y in enumerate(ups):
            term = weights[..., k:k + 1] * y
            fused = term if fused is None else fused + term
        return FusedFeatureMap(fused, weights, ups)

    __call__ = fuse_scales
