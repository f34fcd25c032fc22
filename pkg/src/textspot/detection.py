"""Score/geometry head, training targets, detection loss and quad decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import functional as F
from .geometry import Quad, is_valid_quad, signed_area
from .layers import Conv, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

STRIDE = 4


@dataclass
class DetectionMaps:
    score_logits: Tensor   # [N, h, w, 1]
    geometry: Tensor       # [N, h, w, 8], corner offsets divided by N_d

    @property
    def score(self) -> np.ndarray:
        return F._sigmoid_np(self.score_logits.data)


@dataclass
class DetectionTargets:
    score: np.ndarray      # [h, w] (or [N, h, w]) binary
    geometry: np.ndarray   # [h, w, 8]
    mask: np.ndarray       # [h, w], 0 inside ignored regions
    skipped: int = 0


@dataclass
class LossParts:
    total: Tensor
    quad: Tensor
    cls: Tensor
    no_positive: bool = False
    extra: dict = field(default_factory=dict)


class DetectionHead(Module):
    def __init__(self, rng, channels: int = 128, dtype=np.float32):
        self.score_conv = Conv(rng, 3, channels, 1, dtype=dtype)
        self.geo_conv = Conv(rng, 3, channels, 8, dtype=dtype)

    def predict_maps(self, features: Tensor) -> DetectionMaps:
        return DetectionMaps(self.score_conv(features), self.geo_conv(features))

    __call__ = predict_maps


def pixel_centers(h: int, w: int, stride: int = STRIDE) -> tuple[np.ndarray, np.ndarray]:
    """Input-image coordinates ``(x, y) = (stride*j + stride/2, stride*i + stride/2)``."""
    ys, xs = np.meshgrid(np.arange(h) * stride + stride / 2, np.arange(w) * stride + stride / 2,
                         indexing="ij")
    return xs, ys


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule; points on an edge may fall either way."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        if y1 == y2:
            continue
        crosses = (ys >= min(y1, y2)) & (ys < max(y1, y2))
        xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < xint)
    return inside


def shrink_quad(points: np.ndarray, shrink: float = 0.3) -> np.ndarray:
    c = points.mean(axis=0)
    return c + (1.0 - shrink) * (points - c)


def make_targets(instances: Sequence[tuple[Quad, bool]], image_hw: tuple[int, int],
                 n_d: float = 128.0, shrink: float = 0.3, stride: int = STRIDE) -> DetectionTargets:
    """Rasterize annotated quads into score, geometry and training-mask maps.

    A feature pixel is positive when its input-image center falls inside the
    quad shrunk toward its vertex centroid by ``shrink``. Its geometry target
    is ``(corner_k - center) / n_d`` for the four corners.
    """
    H, W = image_hw
    h, w = -(-H // stride), -(-W // stride)
    score = np.zeros((h, w), dtype=np.float32)
    geometry = np.zeros((h, w, 8), dtype=np.float64)
    mask = np.ones((h, w), dtype=np.float32)
    xs, ys = pixel_centers(h, w, stride)
    skipped = 0
    for quad, ignore in instances:
        pts = np.asarray(quad.points if isinstance(quad, Quad) else quad, dtype=np.float64).reshape(4, 2)
        pts = np.stack([np.clip(pts[:, 0], 0, W), np.clip(pts[:, 1], 0, H)], axis=1)
        if abs(signed_area(pts)) < 1.0:
            skipped += 1
            continue
        if ignore:
            mask[points_in_polygon(xs, ys, pts)] = 0.0
            continue
        inside = points_in_polygon(xs, ys, shrink_quad(pts, shrink))
        score[inside] = 1.0
        offs = (pts[None, :, :] - np.stack([xs[inside], ys[inside]], axis=1)[:, None, :]) / n_d
        geometry[inside] = offs.reshape(-1, 8)
    if skipped:
        logger.warning("make_targets skipped %d degenerate quad(s)", skipped)
    return DetectionTargets(score, geometry, mask, skipped)


def stack_targets(targets: Sequence[DetectionTargets]) -> DetectionTargets:
    return DetectionTargets(np.stack([t.score for t in targets]), np.stack([t.geometry for t in targets]),
                            np.stack([t.mask for t in targets]), sum(t.skipped for t in targets))


def detection_loss(maps: DetectionMaps, targets: DetectionTargets, lam: float = 1.0) -> LossParts:
    """``L_quad + lam * L_cls``.

    ``L_cls`` is binary cross-entropy over unmasked pixels with each class
    weighted by one over twice its pixel count, so the two classes contribute
    equally. ``L_quad`` is the per-pixel sum of smooth-L1 over the 8 geometry
    channels, averaged over unmasked positive pixels.
    """
    logits = maps.score_logits
    n = logits.shape[0]
    score_gt = np.asarray(targets.score, dtype=np.float64).reshape(n, *logits.shape[1:3])
    mask = np.asarray(targets.mask, dtype=np.float64).reshape(score_gt.shape)
    geo_gt = np.asarray(targets.geometry).reshape(n, *logits.shape[1:3], 8)
    if maps.geometry.shape != geo_gt.shape:
        raise ValueError(f"geometry shape {maps.geometry.shape} != targets {geo_gt.shape}")
    pos = (score_gt > 0.5) & (mask > 0)
    neg = (score_gt <= 0.5) & (mask > 0)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    weights = np.zeros_like(score_gt)
    if n_pos and n_neg:
        weights[pos] = 0.5 / n_pos
        weights[neg] = 0.5 / n_neg
    elif n_pos:
        weights[pos] = 1.0 / n_pos
    elif n_neg:
        weights[neg] = 1.0 / n_neg
    l_cls = F.binary_cross_entropy_with_logits(logits, score_gt[..., None], weights[..., None])
    if n_pos:
        diff = maps.geometry - geo_gt.astype(maps.geometry.dtype)
        per = F.smooth_l1(diff) * (pos[..., None] / n_pos).astype(maps.geometry.dtype)
        l_quad = per.sum()
    else:
        l_quad = Tensor(np.zeros((), dtype=logits.dtype))
    return LossParts(l_quad + l_cls * lam, l_quad, l_cls, no_positive=n_pos == 0)


def decode_quads(score: np.ndarray, geometry: np.ndarray, score_thresh: float = 0.8,
                 n_d: float = 128.0, stride: int = STRIDE) -> list[Quad]:
    """One quad per pixel scoring above ``score_thresh``; invalid quads dropped.

    ``score`` is ``[h, w]`` (or ``[h, w, 1]``) probabilities, ``geometry``
    ``[h, w, 8]`` normalized offsets for a single image.
    """
    score = np.asarray(score).reshape(geometry.shape[:2])
    ii, jj = np.nonzero(score > score_thresh)
    if ii.size == 0:
        return []
    centers = np.stack([jj * stride + stride / 2, ii * stride + stride / 2], axis=1).astype(np.float64)
    corners = centers[:, None, :] + n_d * np.asarray(geometry, dtype=np.float64)[ii, jj].reshape(-1, 4, 2)
    out = []
    for pts, s in zip(corners, score[ii, jj]):
        if is_valid_quad(pts):
            out.append(Quad(pts, float(s)))
    return out
