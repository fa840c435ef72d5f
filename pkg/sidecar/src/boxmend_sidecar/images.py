"""Image loading and the masked-region crop handed to the label scorer."""
from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

INLINE_REF_PREFIX = "data:image/png;base64,"

NEUTRAL_GRAY = 128


def load_image(image_ref: str) -> np.ndarray:
    """Resolve a wire image reference (file path or inline PNG) to RGB."""
    if image_ref.startswith(INLINE_REF_PREFIX):
        raw = base64.b64decode(image_ref[len(INLINE_REF_PREFIX):])
        img = Image.open(io.BytesIO(raw))
    else:
        img = Image.open(image_ref)
    return np.asarray(img.convert("RGB"))


def masked_crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pixels inside the mask on a neutral-gray canvas, cropped to its bounds.

    This is the exact region representation the label scorer rates; an empty
    mask degenerates to a single gray pixel.
    """
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.full((1, 1, 3), NEUTRAL_GRAY, dtype=np.uint8)
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    canvas = np.full((r1 - r0, c1 - c0, 3), NEUTRAL_GRAY, dtype=np.uint8)
    window = mask[r0:r1, c0:c1]
    canvas[window] = image[r0:r1, c0:c1][window]
    return canvas


def softmax(values, temperature: float = 1.0) -> list[float]:
    arr = np.asarray(values, dtype=np.float64) / temperature
    arr -= arr.max()
    weights = np.exp(arr)
    return [float(v) for v in weights / weights.sum()]
