"""Deterministic synthetic irregular-text images and their on-disk format.

Words are drawn with the built-in bitmap font in one of four styles:
straight, rotated, perspective (corner jitter) and curved (along an arc).
Each image uses a single style, so style subsets are subsets of images.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .config import DataConfig
from .font import GLYPH_H, GLYPH_W, word_bitmap
from .geometry import Quad, clip_convex, is_valid_quad, signed_area
from .roi import fit_homography

logger = logging.getLogger(__name__)

STYLES = ("straight", "rotated", "perspective", "curved")
MAX_TRIES = 20
INDEX_NAME = "index.txt"

DEFAULT_WORDS = (
    "text net read word sign shop open cafe exit stop road park city bank hotel "
    "street north south east west store sale taxi bus bar menu gate info help "
    "left right main door room hall club king queen star moon sun tree lake river "
    "bridge tower plaza market garden 24 100 2019 7up no1 b52 route66 zone9 a1"
).split()


class DatasetError(ValueError):
    pass


@dataclass
class Instance:
    quad: Quad
    text: str
    ignore: bool = False


@dataclass
class TextSample:
    image: np.ndarray                  # [H, W, 3] in [0, 1]
    instances: list
    seed: int = 0
    style: str = ""
    masks: list = field(default_factory=list, repr=False)   # per-instance glyph coverage, not persisted

    @property
    def annotations(self) -> list[tuple[Quad, bool]]:
        return [(inst.quad, inst.ignore) for inst in self.instances]


@dataclass
class RenderStyle:
    mode: str
    rotation: float = 0.0       # degrees
    jitter: float = 0.0         # fraction of glyph height
    curvature: float = 0.0      # 1 / radius, signed
    glyph_height: float = 16.0


# ------------------------------------------------------------------ styles
def parse_style_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, weight = part.partition(":")
        name = name.strip()
        if name not in STYLES:
            raise ValueError(f"unknown render style {name!r}")
        mix[name] = float(weight)
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("style mix weights must sum to a positive value")
    return {k: v / total for k, v in mix.items()}


def load_word_list(cfg: DataConfig) -> list[str]:
    if cfg.word_list:
        words = [w.strip().lower() for w in Path(cfg.word_list).read_text(encoding="utf-8").split()]
    else:
        words = list(DEFAULT_WORDS)
    words = [w for w in words if w]
    if not words:
        raise ValueError("word list is empty")
    return words


def sample_style(cfg: DataConfig, rng: np.random.Generator) -> str:
    mix = parse_style_mix(cfg.style_mix)
    names = list(mix)
    return names[int(rng.choice(len(names), p=[mix[n] for n in names]))]


# ------------------------------------------------------------------ mapping
class WordMapping:
    """Maps word-frame coordinates ``(u, v)`` (u along the text, v down) to the image."""

    def __init__(self, style: RenderStyle, width: float, height: float, center: np.ndarray):
        self.style = style
        self.w, self.h = width, height
        self.center = np.asarray(center, dtype=np.float64)
        self.kappa = style.curvature if style.mode == "curved" else 0.0
        self.hom = None
        self.inv = None
        if self.kappa == 0.0:
            corners = self.frame_corners()
            angle = math.radians(style.rotation) if style.mode == "rotated" else 0.0
            c, s = math.cos(angle), math.sin(angle)
            rel = corners - np.array([width / 2, height / 2])
            img = self.center + rel @ np.array([[c, s], [-s, c]])
            if style.mode == "perspective":
                img = img + self.jitter_offsets
            self.hom = fit_homography(corners, img)
            self.inv = np.linalg.inv(self.hom)
        else:
            self.radius = 1.0 / abs(self.kappa)

    jitter_offsets = np.zeros((4, 2))

    def frame_corners(self) -> np.ndarray:
        return np.array([[0, 0], [self.w, 0], [self.w, self.h], [0, self.h]], dtype=np.float64)

    def forward(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        if self.hom is not None:
            hom = np.concatenate([uv, np.ones((len(uv), 1))], axis=1) @ self.hom.T
            return hom[:, :2] / hom[:, 2:3]
        u, v = uv[:, 0], uv[:, 1]
        ang = (u - self.w / 2) / self.radius
        if self.kappa > 0:
            # arc bulging upward, center below the text
            r = self.radius - (v - self.h / 2)
            pivot = self.center + np.array([0.0, self.radius])
            return pivot + np.stack([r * np.sin(ang), -r * np.cos(ang)], axis=1)
        r = self.radius + (v - self.h / 2)
        pivot = self.center - np.array([0.0, self.radius])
        return pivot + np.stack([r * np.sin(ang), r * np.cos(ang)], axis=1)

    def inverse(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        if self.inv is not None:
            hom = np.concatenate([xy, np.ones((len(xy), 1))], axis=1) @ self.inv.T
            return hom[:, :2] / hom[:, 2:3]
        if self.kappa > 0:
            rel = xy - (self.center + np.array([0.0, self.radius]))
            ang = np.arctan2(rel[:, 0], -rel[:, 1])
            v = self.radius - np.hypot(rel[:, 0], rel[:, 1]) + self.h / 2
        else:
            rel = xy - (self.center - np.array([0.0, self.radius]))
            ang = np.arctan2(rel[:, 0], rel[:, 1])
            v = np.hypot(rel[:, 0], rel[:, 1]) - self.radius + self.h / 2
        return np.stack([ang * self.radius + self.w / 2, v], axis=1)

    def outline(self, samples: int = 12) -> np.ndarray:
        us = np.linspace(0, self.w, samples)
        top = np.stack([us, np.zeros_like(us)], axis=1)
        bottom = np.stack([us[::-1], np.full_like(us, self.h)], axis=1)
        return self.forward(np.concatenate([top, bottom]))


# --------------------------------------------------------- enclosing quads
def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, screen-clockwise (positive signed area)."""
    pts = sorted(set(map(tuple, np.round(np.asarray(points, dtype=np.float64), 9))))
    if len(pts) < 3:
        return np.asarray(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    hull = np.asarray(lower[:-1] + upper[:-1])
    return hull if signed_area(hull) > 0 else hull[::-1]


def min_area_enclosing_quad(points: np.ndarray) -> np.ndarray:
    """Smallest quad whose four sides each lie along an edge of the convex hull."""
    hull = convex_hull(points)
    n = len(hull)
    if n <= 4:
        if n == 4:
            return hull
        raise ValueError("need at least four hull vertices")
    a = hull
    b = np.roll(hull, -1, axis=0)
    d = b - a
    angle = np.arctan2(d[:, 1], d[:, 0])
    combos = np.array(list(itertools.combinations(range(n), 4)))
    nxt = np.roll(combos, -1, axis=1)
    gaps = (angle[nxt] - angle[combos]) % (2 * np.pi)
    bounded = (gaps < np.pi - 1e-9).all(axis=1)
    combos, nxt = combos[bounded], nxt[bounded]
    # intersection of line through edge i with line through edge j
    p, r = a[combos], d[combos]
    q, s = a[nxt], d[nxt]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    t = ((q - p)[..., 0] * s[..., 1] - (q - p)[..., 1] * s[..., 0]) / denom
    verts = p + t[..., None] * r
    x, y = verts[..., 0], verts[..., 1]
    areas = 0.5 * ((x * np.roll(y, -1, axis=1)).sum(1) - (np.roll(x, -1, axis=1) * y).sum(1))
    areas[~np.isfinite(areas) | (areas <= 0)] = np.inf
    return verts[int(np.argmin(areas))]


def order_like(quad: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Cyclic rotation of the clockwise ``quad`` closest to ``reference`` corners."""
    quad = quad if signed_area(quad) > 0 else quad[::-1]
    best = min(range(4), key=lambda k: float(((np.roll(quad, -k, axis=0) - reference) ** 2).sum()))
    return np.roll(quad, -best, axis=0)


# ------------------------------------------------------------------ render
def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    coarse = rng.normal(0.0, 0.08, (4, 4, 3))
    noise = ndimage.zoom(coarse, (h / 4, w / 4, 1), order=1)[:h, :w]
    return np.clip(0.35 + 0.3 * (img - 0.5) + noise, 0.0, 1.0)


def _text_color(rng: np.random.Generator, local_mean: float) -> np.ndarray:
    if local_mean > 0.5:
        return rng.uniform(0.0, 0.2, 3) * np.ones(3)
    return 0.8 + rng.uniform(0.0, 0.2, 3) * np.ones(3)


def _word_mapping(rng: np.random.Generator, cfg: DataConfig, style_name: str, word: str,
                  size: int) -> tuple[WordMapping, RenderStyle]:
    glyph_h = rng.uniform(cfg.glyph_min, cfg.glyph_max)
    cell = glyph_h / GLYPH_H
    width = (len(word) * (GLYPH_W + 1) - 1) * cell
    height = glyph_h
    rotation = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    jitter = rng.uniform(0.0, cfg.max_jitter)
    jit = rng.uniform(-1.0, 1.0, (4, 2)) * jitter * np.array([2.0, 1.0]) * height
    max_kappa = math.radians(cfg.max_sweep) / max(width, 1e-9)
    kappa = rng.uniform(0.4, 1.0) * max_kappa * rng.choice([-1.0, 1.0])
    center = rng.uniform(0.0, size, 2)
    style = RenderStyle(style_name,
                        rotation=rotation if style_name == "rotated" else 0.0,
                        jitter=jitter if style_name == "perspective" else 0.0,
                        curvature=kappa if style_name == "curved" else 0.0,
                        glyph_height=glyph_h)
    mapping = WordMapping.__new__(WordMapping)
    mapping.jitter_offsets = jit if style_name == "perspective" else np.zeros((4, 2))
    WordMapping.__init__(mapping, style, width, height, center)
    return mapping, style


def annotation_quad(mapping: WordMapping) -> np.ndarray:
    corners = mapping.forward(mapping.frame_corners())
    if mapping.kappa == 0.0:
        return corners
    quad = min_area_enclosing_quad(mapping.outline())
    return order_like(quad, corners)


def _rasterize(mapping: WordMapping, word: str, quad: np.ndarray, h: int, w: int):
    """Glyph coverage in [0, 1] over the quad's bounding box."""
    cell = mapping.style.glyph_height / GLYPH_H
    bmp = word_bitmap(word, spacing=1, margin=1)
    x0, y0 = np.floor(quad.min(0) - 2).astype(int)
    x1, y1 = np.ceil(quad.max(0) + 2).astype(int)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return None
    yy, xx = np.mgrid[y0:y1, x0:x1]
    uv = mapping.inverse(np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1))
    bx = uv[:, 0] / cell + 1 - 0.5
    by = uv[:, 1] / cell + 1 - 0.5
    alpha = ndimage.map_coordinates(bmp, [by, bx], order=1, mode="constant", cval=0.0)
    return (slice(y0, y1), slice(x0, x1)), np.clip(alpha, 0, 1).reshape(y1 - y0, x1 - x0)


def _fits(quad: np.ndarray, size: int, placed: list[np.ndarray], margin: float = 3.0) -> bool:
    if quad.min() < margin or quad.max() > size - margin:
        return False
    if not is_valid_quad(quad, min_area=16.0):
        return False
    c = quad.mean(0)
    grown = c + (quad - c) * 1.15 + np.sign(quad - c) * margin
    for other in placed:
        oc = other.mean(0)
        og = oc + (other - oc) * 1.15 + np.sign(other - oc) * margin
        if abs(signed_area(clip_convex(grown, og))) > 0:
            return False
    return True


def render_sample(cfg: DataConfig, index: int) -> TextSample:
    """Render sample ``index``; the result depends only on ``(cfg, index)``."""
    words = load_word_list(cfg)
    seed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    image = _background(rng, size, size)
    style_name = sample_style(cfg, rng)
    n_words = int(rng.integers(cfg.words_min, cfg.words_max + 1))
    instances, masks, placed = [], [], []
    for _ in range(n_words):
        for _try in range(MAX_TRIES):
            word = words[int(rng.integers(len(words)))]
            mapping, _ = _word_mapping(rng, cfg, style_name, word, size)
            quad = annotation_quad(mapping)
            if _fits(quad, size, placed):
                break
        else:
            continue
        placed.append(quad)
        raster = _rasterize(mapping, word, quad, size, size)
        mask = np.zeros((size, size))
        if raster is not None:
            (sy, sx), alpha = raster
            mask[sy, sx] = alpha
        local = float(image[mask > 0.5].mean()) if (mask > 0.5).any() else 0.5
        color = _text_color(rng, local)
        image = image * (1 - mask[..., None]) + color * mask[..., None]
        instances.append(Instance(Quad(quad), word, False))
        masks.append(mask)
    return TextSample(np.clip(image, 0.0, 1.0), instances, seed, style_name, masks)


# --------------------------------------------------------------- augment
def transform_points(points: np.ndarray, offset, scale: float) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(offset, dtype=np.float64)) * scale


def augment(sample: TextSample, seed: int, size: int, crop_scale=(0.5, 1.0)) -> TextSample:
    """Random crop, resize of the long side to ``size``, mean padding to a square."""
    rng = np.random.default_rng(seed)
    img = sample.image
    h, w = img.shape[:2]
    s = rng.uniform(*crop_scale)
    ch, cw = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    crop = img[oy:oy + ch, ox:ox + cw]
    factor = size / max(ch, cw)
    if factor != 1.0:
        nh, nw = max(int(round(ch * factor)), 1), max(int(round(cw * factor)), 1)
        yy = (np.arange(nh) + 0.5) / factor - 0.5
        xx = (np.arange(nw) + 0.5) / factor - 0.5
        grid = np.meshgrid(yy, xx, indexing="ij")
        crop = np.stack([ndimage.map_coordinates(crop[..., k], grid, order=1, mode="nearest")
                         for k in range(crop.shape[2])], axis=-1)
    out = np.empty((size, size, img.shape[2]), dtype=img.dtype)
    out[...] = img.mean(axis=(0, 1))
    out[:crop.shape[0], :crop.shape[1]] = crop
    rect = np.array([[0, 0], [cw, 0], [cw, ch], [0, ch]], dtype=np.float64) + [ox, oy]
    instances = []
    for inst in sample.instances:
        pts = inst.quad.points
        area = abs(signed_area(pts))
        inside = abs(signed_area(clip_convex(pts if signed_area(pts) > 0 else pts[::-1], rect))) if area else 0.0
        ignore = inst.ignore or area == 0 or inside < 0.5 * area
        new = transform_points(pts, (ox, oy), factor)
        new = np.stack([np.clip(new[:, 0], 0, crop.shape[1]), np.clip(new[:, 1], 0, crop.shape[0])], axis=1)
        instances.append(Instance(Quad(new, inst.quad.score), inst.text, ignore))
    return TextSample(np.clip(out, 0.0, 1.0), instances, seed, sample.style)


# -------------------------------------------------------------- disk I/O
def write_ppm(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def format_instance(inst: Instance) -> str:
    coords = ",".join(repr(float(v)) for v in inst.quad.points.reshape(-1))
    return f"{coords},{int(inst.ignore)},{inst.text}"


def parse_instance(field_text: str, lineno: int) -> Instance:
    parts = field_text.split(",", 9)
    if len(parts) != 10:
        raise DatasetError(f"line {lineno}: expected 8 coordinates, ignore flag and text")
    try:
        coords = [float(v) for v in parts[:8]]
        ignore = bool(int(parts[8]))
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from exc
    return Instance(Quad(np.array(coords).reshape(4, 2)), parts[9], ignore)


def write_samples(samples, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, sample in enumerate(samples):
        name = f"img_{k:05d}.ppm"
        write_ppm(root / name, sample.image)
        lines.append("\t".join([name] + [format_instance(i) for i in sample.instances]))
    (root / INDEX_NAME).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return root


def write_dataset(cfg: DataConfig, count: int, path: str | Path) -> Path:
    return write_samples((render_sample(cfg, k) for k in range(count)), path)


def parse_index_line(line: str, lineno: int) -> tuple[str, list[Instance]]:
    fields = line.rstrip("\n").split("\t")
    if not fields[0]:
        raise DatasetError(f"line {lineno}: missing image filename")
    return fields[0], [parse_instance(f, lineno) for f in fields[1:] if f != ""]


def read_index(path: str | Path) -> list[tuple[str, list[Instance]]]:
    index = Path(path)
    if index.is_dir():
        index = index / INDEX_NAME
    out = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            out.append(parse_index_line(line, lineno))
    return out


def read_dataset(path: str | Path) -> Iterator[TextSample]:
    root = Path(path)
    for k, (name, instances) in enumerate(read_index(root)):
        yield TextSample(read_ppm(root / name), instances, k)
