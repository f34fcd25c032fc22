"""Perspective RoI transform: homography fitting and bilinear feature sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .functional import bilinear_sample_matrix, sparse_gather
from .geometry import Quad
from .tensor import Tensor, reshape


class DegenerateQuadError(ValueError):
    pass


@dataclass
class RoiFeature:
    features: Tensor        # [h_t, w_t, C]
    source: np.ndarray      # quad corners the features were sampled from


@dataclass
class RoiBatch:
    """RoIs padded to a common width; columns past ``widths[r]`` are zero."""

    features: Tensor        # [R, h_t, W, C]
    widths: np.ndarray      # [R]

    @property
    def mask(self) -> np.ndarray:
        r, h, w, _ = self.features.shape
        return np.broadcast_to(np.arange(w)[None, None, :] < self.widths[:, None, None], (r, h, w))


def _points(q) -> np.ndarray:
    return np.asarray(q.points if isinstance(q, Quad) else q, dtype=np.float64).reshape(4, 2)


def destination_corners(w_t: int, h_t: int) -> np.ndarray:
    return np.array([[0, 0], [w_t - 1, 0], [w_t - 1, h_t - 1], [0, h_t - 1]], dtype=np.float64)


def fit_homography(dst: np.ndarray, src: np.ndarray) -> np.ndarray:
    """3x3 matrix ``T`` with ``T[2, 2] = 1`` mapping each ``dst`` point to ``src``."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(dst, src)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -x * u, -y * u]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -x * v, -y * v]
        b[2 * k] = u
        b[2 * k + 1] = v
    try:
        theta = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateQuadError("singular homography system") from exc
    t = np.append(theta, 1.0).reshape(3, 3)
    if abs(np.linalg.det(t)) <= 1e-12:
        raise DegenerateQuadError("homography is not invertible")
    return t


def solve_homography(src, w_t: int, h_t: int) -> np.ndarray:
    """Homography taking the target grid corners ``(0,0), (w-1,0), (w-1,h-1), (0,h-1)``
    onto the four source corners, in order."""
    if w_t < 1 or h_t < 1:
        raise ValueError("target size must be at least 1x1")
    pts = _points(src)
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-9:
            raise DegenerateQuadError("three quad corners are collinear")
    # a 1-wide or 1-high grid collapses two destination corners; stretch it
    dst = destination_corners(max(w_t, 2), max(h_t, 2))
    if w_t == 1:
        dst[:, 0] -= 0.5
    if h_t == 1:
        dst[:, 1] -= 0.5
    return fit_homography(dst, pts)


def apply_homography(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ t.T
    return hom[:, :2] / hom[:, 2:3]


def roi_width(src, h_t: int = 8, w_max: int = 64) -> int:
    """Width that keeps the quad's aspect ratio at height ``h_t``, clamped to ``[1, w_max]``."""
    p = _points(src)
    edge = lambda i, j: float(np.hypot(*(p[i] - p[j])))
    horizontal = 0.5 * (edge(0, 1) + edge(3, 2))
    vertical = 0.5 * (edge(0, 3) + edge(1, 2))
    if vertical <= 0:
        return w_max
    return int(min(max(round(h_t * horizontal / vertical), 1), w_max))


def sample_grid(t: np.ndarray, w_t: int, h_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates ``(x_s, y_s)`` for every target pixel, row-major."""
    yt, xt = np.meshgrid(np.arange(h_t, dtype=np.float64), np.arange(w_t, dtype=np.float64), indexing="ij")
    src = apply_homography(t, np.stack([xt.ravel(), yt.ravel()], axis=1))
    return src[:, 0], src[:, 1]


def perspective_sample(feat: Tensor, t: np.ndarray, w_t: int, h_t: int) -> Tensor:
    """Warp ``feat [Hs, Ws, C]`` into ``[h_t, w_t, C]`` through homography ``t``.

    Each output value is ``sum_nm U[n, m] K(x_s - m) K(y_s - n)`` with the
    tent kernel ``K(d) = max(0, 1 - |d|)``; outside the map counts as zero.
    The sampling coordinates are constants: gradients reach ``feat`` only.
    """
    hs, ws, c = feat.shape
    xs, ys = sample_grid(t, w_t, h_t)
    mat = bilinear_sample_matrix((1, hs, ws), np.zeros(len(xs), dtype=np.int64), ys, xs)
    out = sparse_gather(reshape(feat, (1, hs, ws, c)), mat)
    return reshape(out, (h_t, w_t, c))


def image_to_feature(points: np.ndarray, stride: int = 4) -> np.ndarray:
    """Map image pixel coordinates to feature-map coordinates.

    Feature pixel ``m`` has its center at image coordinate ``stride*m + stride/2``.
    """
    return (np.asarray(points, dtype=np.float64) - stride / 2) / stride


def roi_align(feat: Tensor, rois: Sequence[tuple[int, np.ndarray]], h_t: int = 8, w_max: int = 64,
              stride: int = 4) -> RoiBatch:
    """Sample every ``(batch_index, image_quad)`` RoI from ``feat [N, H, W, C]``.

    Widths come from :func:`roi_width` on the image-space quad; the batch is
    padded to the widest RoI.
    """
    n, hf, wf, c = feat.shape
    if not rois:
        return RoiBatch(Tensor(np.zeros((0, h_t, 1, c), dtype=feat.dtype)), np.zeros(0, dtype=np.int64))
    widths = np.array([roi_width(q, h_t, w_max) for _, q in rois], dtype=np.int64)
    wpad = int(widths.max())
    bidx, ys, xs, rows = [], [], [], []
    for r, ((b, q), w_t) in enumerate(zip(rois, widths)):
        t = solve_homography(image_to_feature(_points(q), stride), int(w_t), h_t)
        sx, sy = sample_grid(t, int(w_t), h_t)
        yt, xt = np.meshgrid(np.arange(h_t), np.arange(w_t), indexing="ij")
        rows.append((r * h_t + yt.ravel()) * wpad + xt.ravel())
        xs.append(sx)
        ys.append(sy)
        bidx.append(np.full(len(sx), b, dtype=np.int64))
    mat = bilinear_sample_matrix((n, hf, wf), np.concatenate(bidx), np.concatenate(ys), np.concatenate(xs))
    # scatter the sampled rows into the padded layout
    rows = np.concatenate(rows)
    full = mat.tocoo()
    padded = sp.csr_matrix((full.data, (rows[full.row], full.col)), shape=(len(rois) * h_t * wpad, n * hf * wf))
    out = sparse_gather(feat, padded)
    return RoiBatch(reshape(out, (len(rois), h_t, wpad, c)), widths)
