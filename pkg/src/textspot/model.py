"""The full network: shared features, detection head and recognizer."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, FusedFeatureMap, ScaleFusion
from .config import ModelConfig
from .detection import DetectionHead, DetectionMaps
from .layers import Module
from .recognition import CharVocab, Recognizer
from .tensor import Tensor


def normalize_images(images: np.ndarray, dtype) -> np.ndarray:
    """Shift ``[0, 1]`` pixels to be roughly zero-centred; adds a batch axis if needed."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return (arr - 0.5).astype(dtype)


class TextSpotter(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype).type
        self.cfg = cfg
        self.dtype = dtype
        self.vocab = CharVocab(cfg.vocab)
        self.backbone = Backbone(rng, cfg.stem_width, cfg.widths, dtype=dtype)
        self.fusion = ScaleFusion(rng, cfg.widths, cfg.block_mid, cfg.fused, dtype=dtype)
        self.head = DetectionHead(rng, cfg.fused, dtype=dtype)
        self.recognizer = Recognizer(
            rng, cfg.fused, self.vocab, conv_width=cfg.rec_conv_width, conv_layers=cfg.rec_conv_layers,
            enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden, embed=cfg.embed, attn=cfg.attn,
            bidirectional=cfg.bidirectional, dtype=dtype)

    def shared_features(self, images: np.ndarray) -> FusedFeatureMap:
        x = Tensor(normalize_images(images, self.dtype))
        return self.fusion(self.backbone(x))

    def detect(self, fused: FusedFeatureMap) -> DetectionMaps:
        return self.head(fused.features)
