import logging

import numpy as np
import pytest

from textspot.backbone import Backbone, PyramidFeatures, ScaleFusion
from textspot.detection import (DetectionHead, DetectionMaps, decode_quads, detection_loss, make_targets,
                               points_in_polygon, stack_targets)
from textspot.geometry import Quad
from textspot.tensor import Tensor, backward

from oracles import random_convex_quad


def rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def roundtrip_error(rng) -> float:
    pts = random_convex_quad(rng, rng.uniform(60, 196, 2), rng.uniform(25, 55))
    t = make_targets([(Quad(pts), False)], (256, 256), n_d=128.0, shrink=0.3)
    assert t.score.sum() > 0
    quads = decode_quads(t.score, t.geometry, score_thresh=0.5, n_d=128.0)
    assert len(quads) == int(t.score.sum())
    return max(float(np.abs(q.points - pts).max()) for q in quads)


def test_targets_decode_back_to_source_quads():
    rng = np.random.default_rng(0)
    assert max(roundtrip_error(rng) for _ in range(20)) < 1e-3


def test_positive_pixels_lie_in_shrunk_quad():
    t = make_targets([(Quad(rect(40, 40, 120, 80)), False)], (256, 256), shrink=0.3)
    ii, jj = np.nonzero(t.score)
    xs, ys = jj * 4 + 2, ii * 4 + 2
    # shrunk box is [52, 108] x [46, 74]
    assert xs.min() >= 52 and xs.max() <= 108 and ys.min() >= 46 and ys.max() <= 74
    assert t.score.shape == (64, 64) and t.geometry.shape == (64, 64, 8)


def test_ignored_quads_are_masked_not_positive():
    t = make_targets([(Quad(rect(40, 40, 120, 80)), True)], (256, 256))
    assert t.score.sum() == 0
    assert (t.mask == 0).sum() > 0


def test_degenerate_quads_are_skipped_with_warning(caplog):
    flat = Quad(np.array([[0, 0], [10, 0], [20, 0], [30, 0]], dtype=float))
    with caplog.at_level(logging.WARNING):
        t = make_targets([(flat, False)], (64, 64))
    assert t.skipped == 1 and t.score.sum() == 0
    assert "skipped" in caplog.text


def test_points_in_polygon_square():
    xs, ys = np.meshgrid(np.arange(10) + 0.5, np.arange(10) + 0.5)
    assert points_in_polygon(xs, ys, rect(2, 2, 6, 5)).sum() == 12


def _maps_from_targets(t, logit=20.0):
    score = np.where(t.score > 0, logit, -logit)[..., None]
    return DetectionMaps(Tensor(score, requires_grad=True), Tensor(t.geometry, requires_grad=True))


def test_loss_near_zero_for_perfect_prediction():
    t = stack_targets([make_targets([(Quad(rect(40, 40, 120, 80)), False)], (128, 128))])
    parts = detection_loss(_maps_from_targets(t), t, lam=1.0)
    assert float(parts.quad.data) == 0.0
    assert float(parts.cls.data) < 1e-8


def test_classes_contribute_equally():
    t = stack_targets([make_targets([(Quad(rect(40, 40, 120, 80)), False)], (128, 128))])
    zero = DetectionMaps(Tensor(np.zeros((1, 32, 32, 1))), Tensor(t.geometry))
    # with logits at 0 each class adds 0.5 * log 2 no matter how many pixels it has
    assert float(detection_loss(zero, t).cls.data) == pytest.approx(np.log(2))


def test_lambda_scales_classification_term():
    t = stack_targets([make_targets([(Quad(rect(10, 10, 60, 40)), False)], (64, 64))])
    rng = np.random.default_rng(0)
    maps = DetectionMaps(Tensor(rng.standard_normal((1, 16, 16, 1))), Tensor(rng.standard_normal((1, 16, 16, 8))))
    one = detection_loss(maps, t, lam=1.0)
    three = detection_loss(maps, t, lam=3.0)
    assert float(three.total.data) == pytest.approx(float(one.quad.data) + 3 * float(one.cls.data))


def test_no_positive_pixels_gives_classification_only():
    t = stack_targets([make_targets([], (64, 64))])
    maps = DetectionMaps(Tensor(np.zeros((1, 16, 16, 1)), requires_grad=True), Tensor(np.ones((1, 16, 16, 8))))
    parts = detection_loss(maps, t)
    assert parts.no_positive and float(parts.quad.data) == 0.0
    backward(parts.total)
    assert np.isfinite(maps.score_logits.grad).all()


def test_decode_drops_low_scores_and_invalid_quads():
    geo = np.zeros((4, 4, 8))
    score = np.zeros((4, 4))
    score[1, 1] = 0.9
    geo[1, 1] = (rect(0, 0, 8, 4) - [6, 6]).reshape(-1) / 128.0
    score[2, 2] = 0.95   # all corners on the centre: zero area
    assert len(decode_quads(score, geo, 0.8)) == 1
    assert decode_quads(score, geo, 0.99) == []


def test_backbone_pyramid_and_fusion_shapes():
    rng = np.random.default_rng(0)
    bb = Backbone(rng, 4, (4, 6, 8, 10), dtype=np.float64)
    pyr = bb.extract_pyramid(Tensor(rng.standard_normal((2, 64, 96, 3))))
    assert [lvl.shape for lvl in pyr.levels] == [(2, 16, 24, 4), (2, 8, 12, 6), (2, 4, 6, 8), (2, 2, 3, 10)]
    fused = ScaleFusion(rng, (4, 6, 8, 10), 5, 7, dtype=np.float64).fuse_scales(pyr)
    assert fused.features.shape == (2, 16, 24, 7)
    np.testing.assert_allclose(fused.weights.data.sum(-1), 1.0)
    manual = sum(fused.weights.data[..., k:k + 1] * fused.upsampled[k].data for k in range(4))
    np.testing.assert_allclose(fused.features.data, manual)
    maps = DetectionHead(rng, 7, dtype=np.float64)(fused.features)
    assert maps.score_logits.shape == (2, 16, 24, 1) and maps.geometry.shape == (2, 16, 24, 8)


def test_backbone_rejects_bad_sizes():
    bb = Backbone(np.random.default_rng(0), 4, (4, 4, 4, 4))
    with pytest.raises(ValueError):
        bb.extract_pyramid(Tensor(np.zeros((1, 40, 64, 3))))
    with pytest.raises(ValueError):
        bb.extract_pyramid(Tensor(np.zeros((1, 64, 64, 1))))
    with pytest.raises(ValueError):
        ScaleFusion(np.random.default_rng(0), (4, 4, 4, 4)).fuse_scales(PyramidFeatures([]))
