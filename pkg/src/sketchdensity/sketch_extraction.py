"""Key-density sketch extraction.

Four sketch levels are produced per image, coarse to fine:

1. outline polylines from the annotation, rasterized;
2. region contours from the annotation's label mask;
3. a sparse coherent line drawing (edge tangent flow + flow-based DoG);
4. a dense coherent line drawing.

Every level then goes through :func:`simplify_sketch`. Sketches are 2-D
float arrays with 1 for ink and 0 for blank paper.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import ConfigurationError, InputError

KEY_DENSITIES = (0.2, 0.4, 0.6, 0.8)
FALLBACK_DIRECTION = (0.0, 1.0)

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CldParams:
    """Coherent line drawing parameters.

    ``response_gain`` scales the flow-smoothed DoG response before the
    ``tanh`` soft threshold, since images live in [0, 1] rather than
    [0, 255].
    """

    etf_kernel_radius: int = 5
    etf_iterations: int = 3
    sigma_c: float = 1.0
    sigma_s: float = 1.6
    sigma_m: float = 3.0
    rho: float = 0.99
    tau: float = 0.5
    response_gain: float = 60.0

    def __post_init__(self):
        if self.etf_kernel_radius < 1:
            raise InputError("etf_kernel_radius must be >= 1")
        if self.etf_iterations < 0:
            raise InputError("etf_iterations must be >= 0")
        if min(self.sigma_c, self.sigma_s, self.sigma_m) <= 0:
            raise InputError("sigmas must be positive")
        if self.sigma_s <= self.sigma_c:
            raise InputError("sigma_s must exceed sigma_c")
        if not 0.0 < self.rho <= 1.0:
            raise InputError("rho must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise InputError("tau must lie in [0, 1]")


SPARSE_CLD = CldParams(tau=0.6)
DENSE_CLD = CldParams(tau=0.2)


@dataclass
class AnnotationRecord:
    """Polylines are lists of (x, y) points, x along columns."""

    polylines: list = field(default_factory=list)
    label_mask: np.ndarray | None = None


@dataclass
class KeyDensitySketchSet:
    densities: list
    sketches: list
    source_id: str = ""

    def __post_init__(self):
        if len(self.densities) != len(self.sketches):
            raise InputError("one sketch per density is required")
        if len(self.densities) < 2:
            raise InputError("a key density set needs at least two entries")
        if any(b <= a for a, b in zip(self.densities, self.densities[1:])):
            raise InputError("key densities must be strictly increasing")
        shapes = {np.shape(s) for s in self.sketches}
        if len(shapes) != 1:
            raise InputError(f"key sketches differ in resolution: {shapes}")

    def __len__(self):
        return len(self.densities)

    def entries(self):
        return list(zip(self.densities, self.sketches))


@dataclass(frozen=True)
class LevelSpec:
    """How one key level is produced.

    ``kind`` is one of ``"polyline"``, ``"contour"`` or ``"cld"``.
    """

    kind: str
    density: float
    cld: CldParams | None = None
    line_width: int = 1
    min_component_px: int = 4
    target_thickness: int = 1

    def __post_init__(self):
        if self.kind not in ("polyline", "contour", "cld"):
            raise ConfigurationError(f"unknown level kind {self.kind!r}")
        if self.kind == "cld" and self.cld is None:
            raise ConfigurationError("cld level requires CldParams")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigurationError("level density must lie in [0, 1]")


def default_level_specs():
    return [
        LevelSpec("polyline", KEY_DENSITIES[0]),
        LevelSpec("contour", KEY_DENSITIES[1]),
        LevelSpec("cld", KEY_DENSITIES[2], cld=SPARSE_CLD),
        LevelSpec("cld", KEY_DENSITIES[3], cld=DENSE_CLD),
    ]


def luminance(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected H x W x 3 image, got {image.shape}")
    return image @ _LUMA


def _check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected H x W x 3 image, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return image


def _shift(arr, dy, dx):
    """out[r, c] = arr[r + dy, c + dx], zero outside the image."""
    h, w = arr.shape[:2]
    out = np.zeros_like(arr)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = arr[ys, xs]
    return out


def _fill_degenerate(tangent, mag, offsets):
    """Give zero-gradient pixels the dominant orientation of their disk.

    Orientation is averaged in doubled-angle form (weighted by neighbour
    magnitude) so opposite-signed neighbours reinforce instead of cancel.
    Thin dark lines have zero Sobel response on their centre pixel; without
    this step those pixels could never acquire a direction.
    """
    empty = np.linalg.norm(tangent, axis=2) == 0
    if not empty.any():
        return tangent
    tx, ty = tangent[..., 0], tangent[..., 1]
    cos2 = mag * (tx * tx - ty * ty)
    sin2 = mag * (2.0 * tx * ty)
    acc_c = np.zeros_like(mag)
    acc_s = np.zeros_like(mag)
    for dy, dx in offsets:
        acc_c += _shift(cos2, dy, dx)
        acc_s += _shift(sin2, dy, dx)
    strength = np.hypot(acc_c, acc_s)
    fill = empty & (strength > 1e-12)
    angle = 0.5 * np.arctan2(acc_s, acc_c)
    out = tangent.copy()
    out[fill, 0] = np.cos(angle[fill])
    out[fill, 1] = np.sin(angle[fill])
    return out


def compute_etf(image, params=CldParams()):
    """Edge tangent flow as an H x W x 2 field of (x, y) unit vectors.

    Tangents start perpendicular to the Sobel gradient and are refined by
    magnitude-weighted, sign-aligned averaging over a disk of radius
    ``params.etf_kernel_radius``. Zero-gradient pixels borrow the dominant
    orientation of their disk first; pixels with no gradient anywhere in
    reach receive :data:`FALLBACK_DIRECTION`.
    """
    lum = luminance(_check_image(image))
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    valid = mag > 1e-10
    tangent = np.zeros(lum.shape + (2,))
    tangent[valid, 0] = -gy[valid] / mag[valid]
    tangent[valid, 1] = gx[valid] / mag[valid]
    peak = mag.max()
    if peak > 0:
        mag = mag / peak

    r = params.etf_kernel_radius
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
               if dy * dy + dx * dx <= r * r]
    tangent = _fill_degenerate(tangent, mag, offsets)
    for _ in range(params.etf_iterations):
        acc = np.zeros_like(tangent)
        for dy, dx in offsets:
            t_n = _shift(tangent, dy, dx)
            m_n = _shift(mag, dy, dx)
            dot = np.einsum("ijk,ijk->ij", tangent, t_n)
            # sign(dot) * |dot| aligns orientation and weights by coherence
            weight = dot * 0.5 * (1.0 + np.tanh(m_n - mag))
            acc += weight[..., None] * t_n
        norm = np.linalg.norm(acc, axis=2)
        ok = norm > 1e-12
        tangent = np.zeros_like(acc)
        tangent[ok] = acc[ok] / norm[ok, None]

    degenerate = np.linalg.norm(tangent, axis=2) < 0.5
    tangent[degenerate] = FALLBACK_DIRECTION
    return tangent


def _gauss(x, sigma):
    return np.exp(-(x * x) / (2.0 * sigma * sigma))


def dog_kernel(params):
    """Offsets and weights of the 1-D difference of Gaussians."""
    half = int(math.ceil(3.0 * params.sigma_s))
    k = np.arange(-half, half + 1, dtype=np.float64)
    gc = _gauss(k, params.sigma_c)
    gs = _gauss(k, params.sigma_s)
    return k, gc / gc.sum() - params.rho * gs / gs.sum()


def fdog_response(image, etf, params=CldParams()):
    """Flow-smoothed DoG response; negative values mark dark lines."""
    lum = luminance(_check_image(image))
    etf = np.asarray(etf, dtype=np.float64)
    if etf.shape != lum.shape + (2,):
        raise InputError(f"etf shape {etf.shape} does not match image {lum.shape}")
    h, w = lum.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)

    # across the flow
    offsets, weights = dog_kernel(params)
    gx, gy = etf[..., 1], -etf[..., 0]
    across = np.zeros_like(lum)
    for k, f in zip(offsets, weights):
        sample = ndimage.map_coordinates(
            lum, [rows + k * gy, cols + k * gx], order=1, mode="nearest")
        across += f * sample

    # along the flow, both directions from each pixel
    steps = int(math.ceil(3.0 * params.sigma_m))
    total = across.copy()
    norm = np.ones_like(lum)
    for sign in (1.0, -1.0):
        py, px = rows.copy(), cols.copy()
        ty, tx = sign * etf[..., 1], sign * etf[..., 0]
        for j in range(1, steps + 1):
            py = py + ty
            px = px + tx
            inside = (py >= 0) & (py <= h - 1) & (px >= 0) & (px <= w - 1)
            wj = _gauss(float(j), params.sigma_m)
            val = ndimage.map_coordinates(across, [py, px], order=1, mode="nearest")
            total += np.where(inside, wj * val, 0.0)
            norm += np.where(inside, wj, 0.0)
            iy = np.clip(np.rint(py), 0, h - 1).astype(int)
            ix = np.clip(np.rint(px), 0, w - 1).astype(int)
            ny, nx = etf[iy, ix, 1], etf[iy, ix, 0]
            flip = np.where(nx * tx + ny * ty < 0, -1.0, 1.0)
            ty, tx = flip * ny, flip * nx
    return total / norm


def fdog_filter(image, etf, params=CldParams()):
    """Binary line drawing: ink where tanh(-gain * H) exceeds tau."""
    response = fdog_response(image, etf, params)
    strength = np.tanh(-params.response_gain * response)
    return (strength > params.tau).astype(np.float64)


def _square(width):
    return np.ones((width, width), dtype=bool)


def _binary(sketch):
    sketch = np.asarray(sketch)
    if sketch.ndim == 3 and sketch.shape[2] == 1:
        sketch = sketch[..., 0]
    if sketch.ndim != 2:
        raise InputError(f"expected a 2-D sketch, got {sketch.shape}")
    return sketch > 0.5


def simplify_sketch(sketch, min_component_px=4, target_thickness=1):
    """Drop specks, thin strokes to one pixel, then thicken to target width."""
    ink = _binary(sketch)
    labels, n = ndimage.label(ink, structure=np.ones((3, 3)))
    if n:
        sizes = ndimage.sum(ink, labels, index=np.arange(1, n + 1))
        keep = np.concatenate([[False], sizes >= min_component_px])
        ink = keep[labels]
    ink = skeletonize(ink)
    if target_thickness > 1:
        ink = ndimage.binary_dilation(ink, structure=_square(target_thickness))
    return ink.astype(np.float64)


def _round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(int)


def _segment_pixels(p0, p1):
    (x0, y0), (x1, y1) = p0, p1
    n = int(math.ceil(max(abs(x1 - x0), abs(y1 - y0))))
    k = np.arange(n + 1, dtype=np.float64)
    if n == 0:
        return _round_half_up(np.array([y0])), _round_half_up(np.array([x0]))
    # delta * k / n keeps exact half-pixel positions exact for integer endpoints
    return _round_half_up(y0 + (y1 - y0) * k / n), _round_half_up(x0 + (x1 - x0) * k / n)


def rasterize_polylines(annotation, height, width, line_width=1):
    """Draw every polyline as connected segments; ``line_width`` in pixels."""
    ink = np.zeros((height, width), dtype=bool)
    for line in annotation.polylines:
        pts = np.asarray(line, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            continue
        if (pts[:, 0] < 0).any() or (pts[:, 0] > width - 1).any() or \
                (pts[:, 1] < 0).any() or (pts[:, 1] > height - 1).any():
            raise InputError("polyline point outside the image")
        if len(pts) == 1:
            pts = np.vstack([pts, pts])
        for p0, p1 in zip(pts[:-1], pts[1:]):
            rr, cc = _segment_pixels(p0, p1)
            ink[rr, cc] = True
    if line_width > 1:
        ink = ndimage.binary_dilation(ink, structure=_square(line_width))
    return ink.astype(np.float64)


def mask_to_contour_sketch(label_mask, line_width=1):
    """Ink on every pixel with a 4-neighbour of smaller label.

    Placing the contour on the larger-label side keeps it one pixel wide.
    """
    mask = np.asarray(label_mask)
    if mask.ndim != 2:
        raise InputError("label mask must be 2-D")
    mask = mask.astype(np.int64)
    ink = np.zeros(mask.shape, dtype=bool)
    ink[1:, :] |= mask[:-1, :] < mask[1:, :]
    ink[:-1, :] |= mask[1:, :] < mask[:-1, :]
    ink[:, 1:] |= mask[:, :-1] < mask[:, 1:]
    ink[:, :-1] |= mask[:, 1:] < mask[:, :-1]
    if line_width > 1:
        ink = ndimage.binary_dilation(ink, structure=_square(line_width))
    return ink.astype(np.float64)


def extract_level(image, annotation, spec, etf=None):
    """Raw (unsimplified) sketch for one level spec."""
    h, w = image.shape[:2]
    if spec.kind == "polyline":
        if annotation is None:
            raise ConfigurationError("polyline level requires an annotation")
        return rasterize_polylines(annotation, h, w, spec.line_width)
    if spec.kind == "contour":
        if annotation is None or annotation.label_mask is None:
            raise ConfigurationError("contour level requires a label mask")
        if np.shape(annotation.label_mask) != (h, w):
            raise InputError("label mask resolution does not match the image")
        return mask_to_contour_sketch(annotation.label_mask, spec.line_width)
    if etf is None:
        etf = compute_etf(image, spec.cld)
    return fdog_filter(image, etf, spec.cld)


def build_key_density_set(image, annotation, level_specs=None, source_id=""):
    """Produce the simplified key-density sketches for one image."""
    image = _check_image(image)
    specs = list(level_specs) if level_specs is not None else default_level_specs()
    if any(b.density <= a.density for a, b in zip(specs, specs[1:])):
        raise ConfigurationError("level specs must be ordered by increasing density")
    for spec in specs:
        if spec.kind == "polyline" and annotation is None:
            raise ConfigurationError("polyline level requires an annotation")
        if spec.kind == "contour" and (annotation is None or annotation.label_mask is None):
            raise ConfigurationError("contour level requires a label mask")

    etf_cache = {}
    sketches = []
    for spec in specs:
        etf = None
        if spec.kind == "cld":
            key = (spec.cld.etf_kernel_radius, spec.cld.etf_iterations)
            if key not in etf_cache:
                etf_cache[key] = compute_etf(image, spec.cld)
            etf = etf_cache[key]
        raw = extract_level(image, annotation, spec, etf)
        sketch = simplify_sketch(raw, spec.min_component_px, spec.target_thickness)
        if spec.kind == "cld" and sketches:
            sketch = overlay_new_lines(sketches[-1], sketch, spec.min_component_px)
        sketches.append(sketch)
    return KeyDensitySketchSet([s.density for s in specs], sketches, source_id)


def overlay_new_lines(coarse, fine, min_component_px=4, gap=1):
    """Add to ``coarse`` the lines of ``fine`` lying more than ``gap`` px away from it.

    Keeps finer levels nested over coarser ones without doubling lines that
    both levels trace at slightly different offsets.
    """
    base = _binary(coarse)
    near = ndimage.binary_dilation(base, _square(2 * gap + 1))
    extra = _binary(fine) & ~near
    if min_component_px > 1 and extra.any():
        labels, n = ndimage.label(extra, np.ones((3, 3), dtype=bool))
        sizes = ndimage.sum(extra, labels, np.arange(1, n + 1))
        extra = np.isin(labels, 1 + np.flatnonzero(sizes >= min_component_px))
    return (base | extra).astype(np.float32)


def cld_params_for_density(density, specs=None):
    """CLD parameters of the CLD level nearest to ``density``."""
    specs = default_level_specs() if specs is None else specs
    cld = [s for s in specs if s.kind == "cld"]
    if not cld:
        raise ConfigurationError("no CLD level configured")
    return min(cld, key=lambda s: (abs(s.density - density), -s.density)).cld


def ink_count(sketch):
    return int(_binary(sketch).sum())


def replace_tau(params, tau):
    return dataclasses.replace(params, tau=tau)
