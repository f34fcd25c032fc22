"""Quadrangles, convex polygon IoU and greedy quad NMS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Quad:
    """Four vertices in image pixels plus a confidence score.

    Vertices follow the reading direction of the text they cover: top-left,
    top-right, bottom-right, bottom-left, which is clockwise on screen
    (positive shoelace area with y pointing down).
    """

    points: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(4, 2)
        self.score = float(self.score)

    @property
    def area(self) -> float:
        return signed_area(self.points)

    def translated(self, dx: float, dy: float) -> "Quad":
        return Quad(self.points + np.array([dx, dy]), self.score)

    def flat(self) -> list[float]:
        return [float(v) for v in self.points.reshape(-1)]

    def __eq__(self, other) -> bool:
        return isinstance(other, Quad) and np.array_equal(self.points, other.points) and self.score == other.score


def signed_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for screen-clockwise (y down) vertex order."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def is_convex(poly: np.ndarray, tol: float = 1e-9) -> bool:
    p = np.asarray(poly, dtype=np.float64)
    n = len(p)
    signs = []
    for i in range(n):
        c = _cross(p[i], p[(i + 1) % n], p[(i + 2) % n])
        if abs(c) > tol:
            signs.append(c > 0)
    return len(signs) > 0 and (all(signs) or not any(signs))


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0


def is_simple_quad(points: np.ndarray) -> bool:
    p = np.asarray(points, dtype=np.float64)
    return not (_segments_cross(p[0], p[1], p[2], p[3]) or _segments_cross(p[1], p[2], p[3], p[0]))


def is_valid_quad(points: np.ndarray, min_area: float = 0.0) -> bool:
    """Simple, convex, and positively oriented with area above ``min_area``."""
    p = np.asarray(points, dtype=np.float64)
    if not np.isfinite(p).all():
        return False
    return signed_area(p) > min_area and is_simple_quad(p) and is_convex(p)


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex ``clipper``.

    Both polygons must be screen-clockwise (positive :func:`signed_area`).
    """
    out = [tuple(v) for v in subject]
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        a = clipper[i]
        b = clipper[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        s = inp[-1]
        s_in = ex * (s[1] - a[1]) - ey * (s[0] - a[0]) >= 0
        for e in inp:
            e_in = ex * (e[1] - a[1]) - ey * (e[0] - a[0]) >= 0
            if e_in != s_in:
                # intersection of segment s-e with the clip line
                ds = ex * (s[1] - a[1]) - ey * (s[0] - a[0])
                de = ex * (e[1] - a[1]) - ey * (e[0] - a[0])
                t = ds / (ds - de)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            if e_in:
                out.append(e)
            s, s_in = e, e_in
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _oriented(poly: np.ndarray) -> np.ndarray:
    return poly if signed_area(poly) >= 0 else poly[::-1]


def polygon_iou(a, b) -> float:
    """Intersection over union of two convex polygons (``Quad`` or vertex arrays).

    Degenerate (zero-area) inputs give 0. Concave inputs raise ``ValueError``.
    """
    pa = np.asarray(a.points if isinstance(a, Quad) else a, dtype=np.float64)
    pb = np.asarray(b.points if isinstance(b, Quad) else b, dtype=np.float64)
    area_a = abs(signed_area(pa))
    area_b = abs(signed_area(pb))
    if area_a <= 1e-12 or area_b <= 1e-12:
        return 0.0
    if not (is_convex(pa) and is_convex(pb)):
        raise ValueError("polygon_iou needs convex polygons")
    lo_a, hi_a = pa.min(0), pa.max(0)
    lo_b, hi_b = pb.min(0), pb.max(0)
    if (lo_a > hi_b).any() or (lo_b > hi_a).any():
        return 0.0
    inter = abs(signed_area(clip_convex(_oriented(pa), _oriented(pb))))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def _nms_order(quads: list[Quad]) -> list[int]:
    # score descending; ties by first-corner x then y
    return sorted(range(len(quads)),
                  key=lambda i: (-quads[i].score, quads[i].points[0, 0], quads[i].points[0, 1]))


def nms_quads(quads: list[Quad], iou_thresh: float = 0.2) -> list[Quad]:
    """Greedy non-maximum suppression.

    The best remaining quad is kept and every remaining quad overlapping it
    by more than ``iou_thresh`` is discarded, until none remain.
    """
    if not quads:
        return []
    order = _nms_order(quads)
    pts = np.stack([q.points for q in quads])
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    remaining = np.array(order)
    keep = []
    while remaining.size:
        i = remaining[0]
        keep.append(i)
        rest = remaining[1:]
        touching = ~((lo[rest] > hi[i]).any(axis=1) | (lo[i] > hi[rest]).any(axis=1))
        suppress = np.zeros(rest.size, dtype=bool)
        for k in np.nonzero(touching)[0]:
            suppress[k] = polygon_iou(quads[i], quads[rest[k]]) > iou_thresh
        remaining = rest[~suppress]
    return [quads[i] for i in keep]
