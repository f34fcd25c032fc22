import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textspot.roi import (DegenerateQuadError, apply_homography, destination_corners, image_to_feature,
                         perspective_sample, roi_align, roi_width, solve_homography)
from textspot.tensor import Tensor, backward

from oracles import bilinear_point, random_convex_quad


def homography_errors(rng):
    src = random_convex_quad(rng, rng.uniform(-50, 50, 2), rng.uniform(2, 60))
    w_t, h_t = int(rng.integers(2, 65)), int(rng.integers(2, 17))
    t = solve_homography(src, w_t, h_t)
    dst = destination_corners(w_t, h_t)
    fwd = np.abs(apply_homography(t, dst) - src).max()
    back = np.abs(apply_homography(np.linalg.inv(t), src) - dst).max()
    return fwd, back


def test_homography_maps_corners_exactly():
    rng = np.random.default_rng(0)
    errs = np.array([homography_errors(rng) for _ in range(200)])
    assert errs[:, 0].max() < 1e-6 and errs[:, 1].max() < 1e-6


def test_homography_of_axis_aligned_box_is_affine_scaling():
    t = solve_homography(np.array([[10, 20], [40, 20], [40, 26], [10, 26]], dtype=float), 31, 7)
    np.testing.assert_allclose(t, [[1, 0, 10], [0, 1, 20], [0, 0, 1]], atol=1e-12)


def test_collinear_corners_raise():
    with pytest.raises(DegenerateQuadError):
        solve_homography(np.array([[0, 0], [1, 1], [2, 2], [0, 3]], dtype=float), 8, 4)


def test_single_column_target_is_still_solvable():
    t = solve_homography(np.array([[0, 0], [8, 0], [8, 4], [0, 4]], dtype=float), 1, 4)
    assert np.isfinite(t).all()


def test_roi_width_keeps_aspect_ratio_and_clamps():
    assert roi_width(np.array([[0, 0], [40, 0], [40, 10], [0, 10]], dtype=float), 8, 64) == 32
    assert roi_width(np.array([[0, 0], [900, 0], [900, 10], [0, 10]], dtype=float), 8, 64) == 64
    assert roi_width(np.array([[0, 0], [1, 0], [1, 50], [0, 50]], dtype=float), 8, 64) == 1


def test_perspective_sample_matches_pointwise_bilinear():
    rng = np.random.default_rng(1)
    feat = rng.standard_normal((9, 11, 3))
    src = random_convex_quad(rng, (5, 4), 5)
    t = solve_homography(src, 6, 4)
    out = perspective_sample(Tensor(feat), t, 6, 4).data
    for i in range(4):
        for j in range(6):
            x, y = apply_homography(t, np.array([[j, i]], dtype=float))[0]
            np.testing.assert_allclose(out[i, j], bilinear_point(feat, x, y), atol=1e-12)


def test_perspective_sample_outside_map_is_zero():
    feat = Tensor(np.ones((4, 4, 2)))
    t = solve_homography(np.array([[20, 20], [30, 20], [30, 25], [20, 25]], dtype=float), 4, 2)
    assert np.all(perspective_sample(feat, t, 4, 2).data == 0)


def test_perspective_sample_gradient_only_touches_sampled_cells():
    feat = Tensor(np.zeros((8, 8, 1)), requires_grad=True)
    t = solve_homography(np.array([[1, 1], [3, 1], [3, 2], [1, 2]], dtype=float), 3, 2)
    backward(perspective_sample(feat, t, 3, 2).sum())
    g = feat.grad[..., 0]
    assert g[1:3, 1:4].sum() == pytest.approx(6.0)
    assert g.sum() == pytest.approx(6.0)


def test_image_to_feature_maps_pixel_centres_to_indices():
    np.testing.assert_allclose(image_to_feature(np.array([[2.0, 6.0], [10.0, 2.0]])), [[0, 1], [2, 0]])


def test_roi_align_pads_and_matches_single_sampling():
    rng = np.random.default_rng(2)
    feat = Tensor(rng.standard_normal((2, 16, 16, 3)))
    quads = [np.array([[8, 8], [48, 8], [48, 24], [8, 24]], dtype=float),
             np.array([[10, 30], [30, 34], [28, 50], [8, 46]], dtype=float)]
    batch = roi_align(feat, [(0, quads[0]), (1, quads[1])], h_t=4, w_max=20)
    assert batch.features.shape == (2, 4, int(batch.widths.max()), 3)
    assert batch.widths.tolist() == [roi_width(quads[0], 4, 20), roi_width(quads[1], 4, 20)]
    for r, (b, q) in enumerate([(0, quads[0]), (1, quads[1])]):
        w_t = int(batch.widths[r])
        t = solve_homography(image_to_feature(q), w_t, 4)
        single = perspective_sample(Tensor(feat.data[b]), t, w_t, 4).data
        np.testing.assert_allclose(batch.features.data[r, :, :w_t], single, atol=1e-12)
        assert np.all(batch.features.data[r, :, w_t:] == 0)
        assert batch.mask[r].sum() == 4 * w_t


def test_roi_align_empty():
    batch = roi_align(Tensor(np.zeros((1, 4, 4, 2))), [], h_t=8)
    assert batch.features.shape[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_homography_round_trip_property(seed):
    fwd, back = homography_errors(np.random.default_rng(seed))
    assert fwd < 1e-6 and back < 1e-6
