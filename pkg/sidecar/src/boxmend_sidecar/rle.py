"""Uncompressed COCO RLE codec: column-major runs, first count is zeros."""
from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    """Binary (H, W) array -> {"size": [H, W], "counts": [...]}."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    if flat.size == 0:
        return {"size": [h, w], "counts": [0]}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [h, w], "counts": [int(c) for c in counts]}


def decode(rle: dict) -> np.ndarray:
    """{"size": [H, W], "counts": [...]} -> binary (H, W) array."""
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    values = np.repeat(np.arange(len(counts)) % 2, counts).astype(bool)
    return values.reshape((h, w), order="F")
