"""Synthetic bounding-box noise with reproducible, order-independent randomness.

Each annotation gets its own PCG32 stream keyed by (seed, annotation id), so
injection results do not depend on iteration order and can be parallelized
freely. The uniform mapping is pinned exactly (top 53 bits of a 64-bit draw)
to keep outputs identical across platforms and languages.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .dataset import Dataset
from .exceptions import LevelOutOfRange
from .geometry import Box, ImageDims, clip_corners

_MASK64 = (1 << 64) - 1
_PCG_MULT = 6364136223846793005


class Pcg32:
    """PCG-XSH-RR: 64-bit state, 63-bit stream selector, 32-bit output."""

    __slots__ = ("state", "inc")

    def __init__(self, seed: int, stream: int = 0):
        self.inc = ((stream << 1) | 1) & _MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * _PCG_MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def next_u64(self) -> int:
        hi = self.next_u32()
        return (hi << 32) | self.next_u32()

    def next_float(self) -> float:
        """Uniform draw in [0, 1): top 53 bits of a 64-bit word."""
        return (self.next_u64() >> 11) * 2.0**-53


@dataclass(frozen=True)
class NoiseSample:
    """Relative offsets applied to one box: (dx, dy) shift, (dw, dh) scale."""

    dx: float
    dy: float
    dw: float
    dh: float


@dataclass(frozen=True)
class NoiseConfig:
    level: float
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.level <= 1.0):
            raise LevelOutOfRange(f"noise level must be in [0, 1], got {self.level}")


def sample_noise(rng: Pcg32, level: float) -> NoiseSample:
    """Draw dx, dy, dw, dh i.i.d. Uniform(-level, +level); always 4 draws."""
    if not (0.0 <= level <= 1.0):
        raise LevelOutOfRange(f"noise level must be in [0, 1], got {level}")
    dx, dy, dw, dh = ((2.0 * rng.next_float() - 1.0) * level for _ in range(4))
    return NoiseSample(dx, dy, dw, dh)


def perturb_box(b: Box, n: NoiseSample, dims: ImageDims) -> Box:
    """Shift by (dx*w, dy*h), scale by (1+dw, 1+dh), then clip to the frame."""
    cx = b.cx + n.dx * b.w
    cy = b.cy + n.dy * b.h
    w = b.w * (1.0 + n.dw)
    h = b.h * (1.0 + n.dh)
    corners = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    clipped = clip_corners(*corners, dims)
    if clipped == corners:
        # Nothing clamped: keep the exact center form, so zero noise is
        # the identity with no corner-reconstruction rounding.
        return Box(cx, cy, w, h)
    return Box.from_corners(*clipped)


def inject(d: Dataset, cfg: NoiseConfig) -> Dataset:
    """Perturb every annotation box; masks are dropped, labels untouched."""
    if not (0.0 <= cfg.level <= 1.0):
        raise LevelOutOfRange(f"noise level must be in [0, 1], got {cfg.level}")
    dims_by_image = {img.id: img.dims for img in d.images}
    noisy = []
    for ann in d.annotations:
        rng = Pcg32(cfg.seed, stream=ann.id)
        sample = sample_noise(rng, cfg.level)
        box = perturb_box(ann.box, sample, dims_by_image[ann.image_id])
        noisy.append(replace(ann, box=box, mask=None))
    provenance = dict(d.provenance)
    provenance.update({"seed": cfg.seed, "noise_level": cfg.level, "stage": "noisy"})
    return Dataset(
        images=d.images,
        categories=d.categories,
        annotations=tuple(noisy),
        provenance=provenance,
    )
