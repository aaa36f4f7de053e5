"""Procedural toy scenes with exact annotations and per-level oracle sketches.

A scene is a light background with 1-4 non-overlapping convex shapes
(ellipse, rectangle, triangle). Each shape carries a lighter, slightly offset
inner region and short anti-aliased texture strokes in the rest of its area.
Strokes alternate between high contrast ("strong") and low contrast ("faint"),
which is what separates the two line-drawing levels. Strokes keep clear of
region boundaries and of each other so the line filter sees each one in
isolation; scenes too cramped for that get a few strokes on the background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError
from .sketch_extraction import (
    AnnotationRecord,
    default_level_specs,
    mask_to_contour_sketch,
    rasterize_polylines,
    simplify_sketch,
    _segment_pixels,
)

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")

DEFAULT_PALETTE = (
    (0.90, 0.30, 0.25),
    (0.25, 0.55, 0.90),
    (0.30, 0.75, 0.35),
    (0.95, 0.75, 0.20),
    (0.65, 0.35, 0.80),
    (0.20, 0.75, 0.75),
    (0.90, 0.50, 0.65),
    (0.55, 0.45, 0.30),
)

ELLIPSE_VERTICES = 32
INNER_SCALE = 0.3
INNER_OFFSET = 0.3
STROKES_PER_SHAPE = 10
STROKE_MARGIN = 5
INNER_GAP = 4
STROKE_GAP = 7
STROKE_WIDTH = 1.2
STRONG_EVERY = 2
MIN_STRONG = 2
MIN_FAINT = 2
TRIANGLE_SCALE = 1.3
STRONG_CONTRAST = 0.4
FAINT_CONTRAST = 0.15
_SUPERSAMPLE = 4
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_shapes: int = 2
    resolution: tuple = (64, 64)
    palette: tuple = DEFAULT_PALETTE
    texture_density: float = 0.75

    def __post_init__(self):
        if not 1 <= self.num_shapes <= 4:
            raise InputError("num_shapes must be between 1 and 4")
        h, w = self.resolution
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise InputError("resolution must be >= 16 and divisible by 16")
        if not 0.0 <= self.texture_density <= 1.0:
            raise InputError("texture_density must lie in [0, 1]")
        if len(self.palette) < 1:
            raise InputError("palette must not be empty")


@dataclass
class TextureStroke:
    start: tuple
    end: tuple
    strong: bool
    color: tuple


@dataclass
class ShapeDescriptor:
    kind: str
    center: tuple
    size: tuple
    rotation: float
    fill: tuple
    inner_fill: tuple
    label: int
    inner_offset: tuple = (0.0, 0.0)
    strokes: list = field(default_factory=list)

    def outline(self):
        """Closed polygon (first point repeated) as (x, y) pairs."""
        return _outline(self.kind, self.center, self.size, self.rotation)

    def inner_outline(self):
        center = (self.center[0] + self.inner_offset[0], self.center[1] + self.inner_offset[1])
        return _outline(self.kind, center, self.size, self.rotation, INNER_SCALE)


@dataclass
class Scene:
    image: np.ndarray
    annotation: AnnotationRecord
    shapes: list
    spec: SceneSpec
    background_strokes: list = field(default_factory=list)

    @property
    def strokes(self):
        return [s for shape in self.shapes for s in shape.strokes] + self.background_strokes


def _outline(kind, center, size, rotation, scale=1.0):
    rx, ry = size[0] * scale, size[1] * scale
    if kind == "ellipse":
        ang = np.linspace(0.0, 2 * np.pi, ELLIPSE_VERTICES, endpoint=False)
        pts = np.stack([rx * np.cos(ang), ry * np.sin(ang)], axis=1)
    elif kind == "rectangle":
        pts = np.array([[-rx, -ry], [rx, -ry], [rx, ry], [-rx, ry]])
    elif kind == "triangle":
        ang = np.deg2rad([-90.0, 30.0, 150.0])
        pts = np.stack([rx * np.cos(ang), ry * np.sin(ang)], axis=1)
    else:
        raise InputError(f"unknown shape kind {kind!r}")
    c, s = np.cos(rotation), np.sin(rotation)
    rot = pts @ np.array([[c, s], [-s, c]])
    rot = rot + np.asarray(center)
    return np.vstack([rot, rot[:1]])


def _inside_convex(poly, xs, ys):
    """Vectorised point-in-convex-polygon test for a closed polygon."""
    p = poly[:-1]
    q = poly[1:]
    cross = ((q[:, 0] - p[:, 0])[:, None] * (ys.ravel() - p[:, 1][:, None])
             - (q[:, 1] - p[:, 1])[:, None] * (xs.ravel() - p[:, 0][:, None]))
    inside = np.all(cross >= 0, axis=0) | np.all(cross <= 0, axis=0)
    return inside.reshape(xs.shape)


def _coverage(poly, h, w):
    k = _SUPERSAMPLE
    sub = (np.arange(k) + 0.5) / k - 0.5
    ys = np.arange(h)[:, None, None, None] + sub[None, None, :, None]
    xs = np.arange(w)[None, :, None, None] + sub[None, None, None, :]
    ys, xs = np.broadcast_arrays(ys, xs)
    return _inside_convex(poly, xs, ys).mean(axis=(2, 3))


def _pixel_mask(poly, h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return _inside_convex(poly, xs, ys)


def with_luminance(rgb, target):
    """Rescale an RGB colour to an exact target luminance."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lum = float(rgb @ _LUMA)
    if target <= lum:
        out = rgb * (target / lum) if lum > 0 else np.full(3, target)
    else:
        out = 1.0 - (1.0 - rgb) * (1.0 - target) / (1.0 - lum) if lum < 1 else np.full(3, target)
    return tuple(float(v) for v in np.clip(out, 0.0, 1.0))


def _place_shapes(rng, spec):
    h, w = spec.resolution
    short = min(h, w)
    lo, hi = {1: (0.28, 0.36), 2: (0.21, 0.26)}.get(spec.num_shapes, (0.16, 0.2))
    taken = np.zeros((h, w), dtype=bool)
    placed = []
    for _ in range(spec.num_shapes):
        for attempt in range(400):
            shrink = 1.0 - 0.1 * (attempt // 100)
            rx = rng.uniform(lo, hi) * short * shrink
            ry = rx * rng.uniform(0.7, 1.0)
            kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
            if kind == "triangle":
                # a triangle's inradius is half its circumradius
                rx, ry = rx * TRIANGLE_SCALE, ry * TRIANGLE_SCALE
            rotation = rng.uniform(0, np.pi)
            extent = np.abs(_outline(kind, (0.0, 0.0), (rx, ry), rotation)).max(axis=0)
            limit = (short - 6) / 2.0
            if extent.max() > limit:
                rx, ry = rx * limit / extent.max(), ry * limit / extent.max()
                extent = extent * limit / extent.max()
            cx = rng.uniform(extent[0] + 2, w - 3 - extent[0])
            cy = rng.uniform(extent[1] + 2, h - 3 - extent[1])
            poly = _outline(kind, (cx, cy), (rx, ry), rotation)
            footprint = ndimage.binary_dilation(_pixel_mask(poly, h, w), iterations=3)
            if not (footprint & taken).any():
                taken |= footprint
                placed.append((cx, cy, kind, (rx, ry), rotation))
                break
    return placed


def generate_scene(spec):
    """Deterministic scene for ``spec``; the seed fixes every random choice."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.resolution
    palette = [tuple(c) for c in spec.palette]
    pick = lambda: palette[rng.integers(len(palette))]

    bg = with_luminance(pick(), rng.uniform(0.82, 0.92))
    image = np.empty((h, w, 3))
    image[:] = bg
    label_mask = np.zeros((h, w), dtype=np.int32)

    shapes = []
    background_strokes = []
    for k, (cx, cy, kind, size, rotation) in enumerate(_place_shapes(rng, spec)):
        fill = with_luminance(pick(), rng.uniform(0.45, 0.55))
        inner = with_luminance(pick(), rng.uniform(0.68, 0.74))
        shape = ShapeDescriptor(kind, (cx, cy), size, rotation, fill, inner, 2 * k + 1)
        outer_poly = shape.outline()
        outer_core = ndimage.binary_erosion(_pixel_mask(outer_poly, h, w), iterations=INNER_GAP)
        angle = rng.uniform(0, 2 * np.pi)
        reach = INNER_OFFSET * min(size)
        # pull the inner region back toward the centre until it fits
        for _ in range(6):
            shape.inner_offset = (reach * np.cos(angle), reach * np.sin(angle))
            inner_poly = shape.inner_outline()
            inner_px = _pixel_mask(inner_poly, h, w)
            if not (inner_px & ~outer_core).any():
                break
            reach *= 0.5
        else:
            shape.inner_offset = (0.0, 0.0)
            inner_poly = shape.inner_outline()
        for poly, color in ((outer_poly, fill), (inner_poly, inner)):
            cov = _coverage(poly, h, w)[..., None]
            image = image * (1.0 - cov) + np.asarray(color) * cov
        label_mask[_pixel_mask(outer_poly, h, w)] = shape.label
        label_mask[_pixel_mask(inner_poly, h, w)] = shape.label + 1
        shapes.append(shape)

    occupied = np.zeros((h, w), dtype=bool)

    def place(region, shape, strong, fill_lum):
        ring = ndimage.binary_erosion(region, iterations=STROKE_MARGIN)
        candidates = np.argwhere(ring & ~occupied)
        if not len(candidates):
            return None
        # strokes run roughly parallel to the nearest region boundary
        dgy, dgx = np.gradient(ndimage.distance_transform_edt(region))
        contrast = STRONG_CONTRAST if strong else FAINT_CONTRAST
        color = with_luminance(shape.fill if shape else bg, fill_lum - contrast)
        for _ in range(60):
            yc, xc = candidates[rng.integers(len(candidates))]
            half = 0.5 * rng.uniform(5.0, 8.0)
            angle = np.arctan2(dgx[yc, xc], -dgy[yc, xc]) + rng.uniform(-0.3, 0.3)
            x0, y0 = xc - half * np.cos(angle), yc - half * np.sin(angle)
            x1, y1 = xc + half * np.cos(angle), yc + half * np.sin(angle)
            if not (0 <= min(x0, x1) and max(x0, x1) <= w - 1
                    and 0 <= min(y0, y1) and max(y0, y1) <= h - 1):
                continue
            rr, cc = _segment_pixels((x0, y0), (x1, y1))
            if not ring[rr, cc].all() or occupied[rr, cc].any():
                continue
            along = np.array([x1 - x0, y1 - y0]) / (2 * half)
            across = 0.5 * STROKE_WIDTH * np.array([-along[1], along[0]])
            a, b = np.array([x0, y0]), np.array([x1, y1])
            quad = [a + across, b + across, b - across, a - across, a + across]
            cov = _coverage(np.array(quad), h, w)
            image[:] = image * (1.0 - cov[..., None]) + np.asarray(color) * cov[..., None]
            blocked = np.zeros((h, w), dtype=bool)
            blocked[rr, cc] = True
            occupied[ndimage.binary_dilation(blocked, iterations=STROKE_GAP)] = True
            return TextureStroke((x0, y0), (x1, y1), strong, color)
        return None

    placed = []
    for shape in shapes:
        fill_lum = float(np.asarray(shape.fill) @ _LUMA)
        region = label_mask == shape.label
        for j in range(int(round(spec.texture_density * STROKES_PER_SHAPE))):
            stroke = place(region, shape, j % STRONG_EVERY == 0, fill_lum)
            if stroke is not None:
                shape.strokes.append(stroke)
                placed.append(stroke)
    if spec.texture_density > 0:
        # cramped layouts: top up on the background so every textured scene
        # has strong and faint strokes
        bg_lum = float(np.asarray(bg) @ _LUMA)
        for strong, need in ((True, MIN_STRONG), (False, MIN_FAINT)):
            have = sum(st.strong == strong for st in placed)
            for _ in range(max(0, need - have)):
                stroke = place(label_mask == 0, None, strong, bg_lum)
                if stroke is not None:
                    background_strokes.append(stroke)
                    placed.append(stroke)

    annotation = AnnotationRecord(
        polylines=[s.outline().tolist() for s in shapes], label_mask=label_mask)
    return Scene(np.clip(image, 0.0, 1.0), annotation, shapes, spec, background_strokes)


def _stroke_raster(strokes, h, w):
    ink = np.zeros((h, w))
    for s in strokes:
        rr, cc = _segment_pixels(s.start, s.end)
        ink[rr, cc] = 1.0
    return ink


def oracle_raw(scene, level):
    """Analytic sketch for ``level`` before cleanup."""
    if level not in (1, 2, 3, 4):
        raise InputError("level must be 1..4")
    h, w = scene.image.shape[:2]
    if level == 1:
        return rasterize_polylines(scene.annotation, h, w, 1)
    contours = mask_to_contour_sketch(scene.annotation.label_mask, 1)
    if level == 2:
        return contours
    strokes = scene.strokes if level == 4 else [s for s in scene.strokes if s.strong]
    return np.maximum(contours, _stroke_raster(strokes, h, w))


def oracle_sketch(scene, level, level_specs=None):
    """Analytic per-level sketch in the same stroke style as the pipeline.

    Levels: 1 outline polylines, 2 region contours, 3 contours plus the
    strong texture strokes, 4 contours plus every stroke.
    """
    specs = default_level_specs() if level_specs is None else level_specs
    spec = specs[level - 1] if len(specs) >= level else specs[-1]
    return simplify_sketch(oracle_raw(scene, level), spec.min_component_px,
                           spec.target_thickness)


def corpus_specs(num_train=512, num_eval=64, resolution=(64, 64), seed=0,
                 texture_range=(0.5, 1.0), palette=DEFAULT_PALETTE):
    """Scene specs for a train/eval corpus, split name attached."""
    out = []
    root = np.random.SeedSequence(seed)
    children = root.spawn(num_train + num_eval)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        split = "train" if i < num_train else "eval"
        index = i if i < num_train else i - num_train
        spec = SceneSpec(
            seed=int(rng.integers(2**31 - 1)),
            num_shapes=int(rng.integers(1, 3)),
            resolution=tuple(resolution),
            palette=tuple(tuple(c) for c in palette),
            texture_density=float(rng.uniform(*texture_range)),
        )
        out.append((f"{split}_{index:05d}", split, spec))
    return out
