"""Compositing math and alpha-plane utilities.

Images are stored channels-first (3,H,W) and alpha/mask planes as (H,W)
float32 in [0,1]; masks are strictly binary uint8. All functions are pure and
safe for parallel use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from . import _sepmat
from .errors import ConfigError, OverlapError, ShapeError

_RANGE_TOL = 1e-6


def _check_unit_range(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.size and (arr.min() < -_RANGE_TOL or arr.max() > 1.0 + _RANGE_TOL):
        raise ValueError(f"{what}: values outside [0,1] "
                         f"(min {arr.min():.4g}, max {arr.max():.4g})")
    return np.clip(arr, 0.0, 1.0)


@dataclass(frozen=True)
class ImageRGB:
    """Three [0,1] color planes, stored (3,H,W)."""
    planes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.planes, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"ImageRGB needs (3,H,W), got {arr.shape}")
        object.__setattr__(self, "planes", _check_unit_range(arr, "ImageRGB"))

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class AlphaMatte:
    """A single [0,1] opacity plane, stored (H,W)."""
    plane: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.plane, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"AlphaMatte needs (H,W), got {arr.shape}")
        object.__setattr__(self, "plane", _check_unit_range(arr, "AlphaMatte"))

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """A strictly 0/1 plane, stored (H,W) uint8."""
    plane: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.plane)
        if arr.ndim != 2:
            raise ShapeError(f"BinaryMask needs (H,W), got {arr.shape}")
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"BinaryMask must be strictly 0/1, got values {vals[:5]}")
        object.__setattr__(self, "plane", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    def area(self) -> int:
        return int(self.plane.sum())

    def as_alpha(self) -> AlphaMatte:
        return AlphaMatte(self.plane.astype(np.float32))


@dataclass(frozen=True)
class Box:
    """Pixel box, origin top-left, half-open is NOT used: x1/y1 are exclusive
    bounds with 0 <= x0 < x1 and 0 <= y0 < y1."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    def validate_extents(self, width: int, height: int):
        if self.x1 > width or self.y1 > height:
            raise ValueError(
                f"box ({self.x0},{self.y0},{self.x1},{self.y1}) outside {width}x{height}")

    def rasterize(self, height: int, width: int) -> BinaryMask:
        plane = np.zeros((height, width), dtype=np.uint8)
        plane[self.y0:self.y1, self.x0:self.x1] = 1
        return BinaryMask(plane)

    @staticmethod
    def tight_around(alpha: AlphaMatte) -> "Box":
        ys, xs = np.nonzero(alpha.plane > 0)
        if ys.size == 0:
            raise ValueError("alpha has empty support; no bounding box")
        return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass(frozen=True)
class Pyramid:
    """Band-pass difference planes (finest first) plus the low-pass base."""
    diffs: tuple
    base: np.ndarray


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def composite(fg: ImageRGB, bg: ImageRGB, alpha: AlphaMatte) -> ImageRGB:
    """Blend: out = alpha*fg + (1-alpha)*bg, per pixel per channel."""
    if fg.planes.shape != bg.planes.shape or (fg.height, fg.width) != (alpha.height, alpha.width):
        raise ShapeError(
            f"composite: extents differ fg={fg.planes.shape} bg={bg.planes.shape} "
            f"alpha={alpha.plane.shape}")
    a = alpha.plane[None]
    out = a * fg.planes + (1.0 - a) * bg.planes
    return ImageRGB(np.clip(out, 0.0, 1.0))


def composite_multi(fgs, alphas, bg: ImageRGB) -> ImageRGB:
    """Blend several instances: out = sum_i a_i*fg_i + (1 - sum_i a_i)*bg."""
    if len(fgs) != len(alphas) or not fgs:
        raise ShapeError("composite_multi: need equally many foregrounds and alphas")
    total = np.zeros_like(alphas[0].plane)
    for a in alphas:
        if a.plane.shape != total.shape:
            raise ShapeError("composite_multi: alpha extents differ")
        total = total + a.plane
    if total.max() > 1.0 + 1e-6:
        y, x = np.unravel_index(int(np.argmax(total)), total.shape)
        raise OverlapError(
            f"instance alphas sum to {total.max():.6f} > 1 at pixel (x={x}, y={y})")
    out = (1.0 - np.clip(total, 0.0, 1.0))[None] * bg.planes
    for fg, a in zip(fgs, alphas):
        if fg.planes.shape != bg.planes.shape:
            raise ShapeError("composite_multi: foreground extents differ from background")
        out = out + a.plane[None] * fg.planes
    return ImageRGB(np.clip(out, 0.0, 1.0))


def binarize(alpha: AlphaMatte, threshold: float = 0.5) -> BinaryMask:
    """Plane is 1 where alpha >= threshold (inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"binarize: threshold must be in (0,1), got {threshold}")
    return BinaryMask((alpha.plane >= threshold).astype(np.uint8))


# ---------------------------------------------------------------------------
# bands, dilation, IoU
# ---------------------------------------------------------------------------

def dilate_disk(mask: BinaryMask, radius: float) -> BinaryMask:
    """Dilate by a Euclidean disk via the exact distance transform."""
    if radius <= 0 or not mask.plane.any():
        return mask
    dist = ndimage.distance_transform_edt(mask.plane == 0)
    return BinaryMask((dist <= radius).astype(np.uint8))


def erode_disk(mask: BinaryMask, radius: float) -> BinaryMask:
    if radius <= 0 or mask.plane.all():
        return mask
    dist = ndimage.distance_transform_edt(mask.plane == 1)
    return BinaryMask((dist > radius).astype(np.uint8))


def boundary_pixels(mask: BinaryMask) -> BinaryMask:
    """Pixels with at least one 4-neighbor of opposite value."""
    m = mask.plane.astype(np.int16)
    diff = np.zeros_like(m)
    diff[1:, :] |= m[1:, :] != m[:-1, :]
    diff[:-1, :] |= m[:-1, :] != m[1:, :]
    diff[:, 1:] |= m[:, 1:] != m[:, :-1]
    diff[:, :-1] |= m[:, :-1] != m[:, 1:]
    return BinaryMask(diff.astype(np.uint8))


def transition_band(alpha: AlphaMatte, radius: float = 5,
                    lo: float = 0.01, hi: float = 0.99) -> BinaryMask:
    """Pixels with fractional opacity (lo < a < hi), dilated by a disk.

    A strictly binary alpha has no fractional pixels, so its band is the set
    of 0/1 boundary pixels (4-neighbor of opposite value), dilated likewise.
    """
    if not (0.0 <= lo < hi <= 1.0) or radius < 0:
        raise ConfigError(f"transition_band: bad lo/hi/radius {lo}/{hi}/{radius}")
    plane = alpha.plane
    is_binary = bool(np.all((plane == 0.0) | (plane == 1.0)))
    if is_binary:
        core = boundary_pixels(BinaryMask(plane.astype(np.uint8)))
    else:
        core = BinaryMask(((plane > lo) & (plane < hi)).astype(np.uint8))
    return dilate_disk(core, radius)


def iou(a, b) -> float:
    """Intersection over union of masks and/or boxes; empty/empty gives 0."""
    if isinstance(a, Box) and isinstance(b, Box):
        ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
        iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
        inter = ix * iy
        union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter
        return inter / union if union else 0.0
    if isinstance(a, Box):
        a = a.rasterize(b.height, b.width)
    if isinstance(b, Box):
        b = b.rasterize(a.height, a.width)
    if a.plane.shape != b.plane.shape:
        raise ShapeError(f"iou: extents differ {a.plane.shape} vs {b.plane.shape}")
    pa = a.plane.astype(bool)
    pb = b.plane.astype(bool)
    union = int(np.logical_or(pa, pb).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(pa, pb).sum()) / union


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

def _reduce_plane(p: np.ndarray) -> np.ndarray:
    h, w = p.shape
    return _sepmat.reduce2_matrix(h) @ p @ _sepmat.reduce2_matrix(w).T


def _expand_plane(p: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = p.shape
    return _sepmat.expand2_matrix(h, th) @ p @ _sepmat.expand2_matrix(w, tw).T


def laplacian_pyramid(alpha: AlphaMatte, levels: int = 4) -> Pyramid:
    """Band-pass decomposition with the binomial [1,4,6,4,1]/16 kernel and
    reflect-101 borders; reconstruct() inverts it to within float rounding."""
    if levels < 1:
        raise ConfigError(f"laplacian_pyramid: levels must be >= 1, got {levels}")
    h, w = alpha.plane.shape
    if min(h, w) < 2 ** levels:
        raise ConfigError(
            f"laplacian_pyramid: extents {h}x{w} too small for {levels} levels")
    g = alpha.plane.astype(np.float64)
    diffs = []
    for _ in range(levels):
        nxt = _reduce_plane(g)
        diffs.append(g - _expand_plane(nxt, *g.shape))
        g = nxt
    return Pyramid(tuple(diffs), g)


def reconstruct(pyr: Pyramid) -> np.ndarray:
    """Invert laplacian_pyramid (coarsest first: upsample, add)."""
    g = pyr.base
    for diff in reversed(pyr.diffs):
        g = diff + _expand_plane(g, *diff.shape)
    return g


def area_downsample(plane: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample; extents must be divisible by the factor."""
    h, w = plane.shape
    return (_sepmat.area_matrix(h, factor) @ plane.astype(np.float64)
            @ _sepmat.area_matrix(w, factor).T).astype(plane.dtype)


def resize_plane(plane: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Bilinear resize of a single plane (same convention as the engine op)."""
    h, w = plane.shape
    out = (_sepmat.bilinear_matrix(h, th) @ plane.astype(np.float64)
           @ _sepmat.bilinear_matrix(w, tw).T)
    return out.astype(plane.dtype)


def downsample_mask(mask: BinaryMask, factor: int) -> BinaryMask:
    """Area-average then re-binarize at 0.5, keeping the mask crisp."""
    avg = area_downsample(mask.plane.astype(np.float32), factor)
    return BinaryMask((avg >= 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def read_image(path) -> ImageRGB:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageRGB(arr.transpose(2, 0, 1))


def write_image(path, image: ImageRGB):
    arr = np.round(image.planes.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_alpha(path) -> AlphaMatte:
    """8- or 16-bit grayscale PNG; 16-bit values are scaled by 1/65535."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return AlphaMatte(np.clip(arr, 0.0, 1.0).astype(np.float32))


def write_alpha(path, alpha: AlphaMatte, depth: int = 16):
    if depth == 16:
        arr = np.round(alpha.plane.astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)  # uint16 infers mode I;16
    elif depth == 8:
        arr = np.round(alpha.plane * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    else:
        raise ConfigError(f"write_alpha: depth must be 8 or 16, got {depth}")


def read_mask(path) -> BinaryMask:
    alpha = read_alpha(path)
    return BinaryMask((alpha.plane >= 0.5).astype(np.uint8))


def write_mask(path, mask: BinaryMask):
    Image.fromarray(mask.plane * np.uint8(255), mode="L").save(path)
