"""Box and mask arithmetic shared by every pipeline stage.

Boxes are axis-aligned rectangles in center convention (cx, cy, w, h) over
continuous pixel coordinates. Pixel (row i, col j) covers the unit square
[j, j+1) x [i, i+1), so areas and IoU values are exact rectangle arithmetic
with no rounding ambiguity. Masks are binary rasters; their wire form is
COCO-style uncompressed RLE (column-major runs, first count is zeros).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyMask, GammaOutOfRange, RleLengthMismatch


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle: center (cx, cy), width w > 0, height h > 0."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2)."""
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Point:
    x: float
    y: float


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")


class Mask:
    """Binary raster over image pixels, stored as a bool array (height, width)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(np.asarray(data, dtype=bool))
        if arr.ndim != 2:
            raise ValueError(f"mask data must be 2-D, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        """Number of set pixels."""
        return int(self.data.sum())

    @classmethod
    def zeros(cls, dims: ImageDims) -> "Mask":
        return cls(np.zeros((dims.height, dims.width), dtype=bool))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        raise TypeError("Mask is not hashable")

    def __repr__(self) -> str:
        return f"Mask({self.width}x{self.height}, {self.count()} set)"


@dataclass(frozen=True)
class Rle:
    """Uncompressed COCO RLE: column-major runs, alternating starting with zeros."""

    height: int
    width: int
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "Rle":
        size = obj.get("size")
        counts = obj.get("counts")
        if (
            not isinstance(size, (list, tuple))
            or len(size) != 2
            or not all(isinstance(v, int) for v in size)
            or not isinstance(counts, (list, tuple))
            or not all(isinstance(v, int) and v >= 0 for v in counts)
        ):
            raise RleLengthMismatch(f"malformed RLE object: {obj!r}")
        return cls(height=size[0], width=size[1], counts=tuple(counts))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # Areas from the same corner values as the intersection, so identical
    # boxes give exactly 1.0 despite center-form rounding.
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    return inter / (area_a + area_b - inter)


def mask_iou(a: Mask, b: Mask) -> float:
    """IoU of two masks of identical shape, by pixel count."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    inter = int(np.logical_and(a.data, b.data).sum())
    union = int(np.logical_or(a.data, b.data).sum())
    return inter / union if union else 0.0


def mask_to_box(m: Mask) -> Box:
    """Tightest box covering all set pixels of ``m``.

    A single set pixel at (row i, col j) yields the unit box centered at
    (j + 0.5, i + 0.5). Raises :class:`EmptyMask` when nothing is set so
    callers can fall back to the original annotation.
    """
    rows = np.flatnonzero(m.data.any(axis=1))
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    cols = np.flatnonzero(m.data.any(axis=0))
    y1, y2 = float(rows[0]), float(rows[-1] + 1)
    x1, x2 = float(cols[0]), float(cols[-1] + 1)
    return Box.from_corners(x1, y1, x2, y2)


def box_center(b: Box) -> Point:
    return Point(b.cx, b.cy)


def interpolate_boxes(b_hat: Box, b: Box, gamma: float) -> Box:
    """Coordinate-wise convex combination gamma*b_hat + (1-gamma)*b."""
    if not (0.0 <= gamma <= 1.0) or math.isnan(gamma):
        raise GammaOutOfRange(f"gamma must be in [0, 1], got {gamma}")
    g = float(gamma)
    return Box(
        g * b_hat.cx + (1 - g) * b.cx,
        g * b_hat.cy + (1 - g) * b.cy,
        g * b_hat.w + (1 - g) * b.w,
        g * b_hat.h + (1 - g) * b.h,
    )


def _floor_span(lo: float, hi: float, limit: float) -> tuple[float, float]:
    # Enforce a 1-pixel minimum span, shifted inward when it would poke out.
    if hi - lo >= 1.0:
        return lo, hi
    c = (lo + hi) / 2
    lo, hi = c - 0.5, c + 0.5
    if lo < 0:
        return 0.0, 1.0
    if hi > limit:
        return limit - 1.0, limit
    return lo, hi


def clip_corners(
    x1: float, y1: float, x2: float, y2: float, dims: ImageDims
) -> tuple[float, float, float, float]:
    """Clamp a (possibly degenerate) corner-form span to the frame.

    Corners are clamped to [0, width] x [0, height], then each side is
    floored at 1 pixel. Accepts zero-width/height input so noise with a
    scale factor of exactly -1 still yields a valid box.
    """
    w, h = float(dims.width), float(dims.height)
    x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
    y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
    x1, x2 = _floor_span(x1, x2, w)
    y1, y2 = _floor_span(y1, y2, h)
    return x1, y1, x2, y2


def clip_box(b: Box, dims: ImageDims) -> Box:
    """Clamp ``b`` to the frame, flooring width/height at 1 pixel."""
    corners = b.corners()
    clipped = clip_corners(*corners, dims)
    if clipped == corners:
        return b
    return Box.from_corners(*clipped)


def rle_encode(m: Mask) -> Rle:
    """Encode a mask as uncompressed COCO RLE (column-major, zeros first)."""
    flat = m.data.flatten(order="F")
    n = flat.size
    if n == 0:
        return Rle(height=m.height, width=m.width, counts=(0,))
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [n]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return Rle(height=m.height, width=m.width, counts=tuple(int(c) for c in counts))


def rle_decode(rle: Rle, dims: ImageDims | None = None) -> Mask:
    """Decode uncompressed COCO RLE back into a mask.

    Raises :class:`RleLengthMismatch` when the counts do not sum to
    width*height, or when ``dims`` is given and disagrees with the RLE size.
    """
    h, w = rle.height, rle.width
    if dims is not None and (dims.height, dims.width) != (h, w):
        raise RleLengthMismatch(
            f"RLE size {h}x{w} does not match expected {dims.height}x{dims.width}"
        )
    total = sum(rle.counts)
    if total != w * h:
        raise RleLengthMismatch(f"counts sum to {total}, expected {w * h}")
    values = np.repeat(np.arange(len(rle.counts)) % 2, rle.counts).astype(bool)
    return Mask(values.reshape((h, w), order="F"))
