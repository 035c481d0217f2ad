"""Height simulation for drone views.

A positive ``delta_p`` mirror-pads the image on all four sides and scales it
back down, so the scene looks as if shot from higher up.  A negative value
crops a ring off the border and scales back up (lower).  The recorded
height is relabelled linearly with ``lambda_aug`` meters per pixel.
"""

from __future__ import annotations

import numpy as np

from .tensor import as_image, resize, resize_nearest

LAMBDA_AUG = 0.7


def height_canvas(img: np.ndarray, delta_p: int) -> np.ndarray:
    """The pre-resize canvas: reflection-padded (>0) or center-cropped (<0)."""
    h, w = img.shape[:2]
    p = int(delta_p)
    if p > 0:
        pad = ((p, p), (p, p)) + ((0, 0),) * (img.ndim - 2)
        return np.pad(img, pad, mode="reflect")
    if p < 0:
        q = -p
        if 2 * q >= min(h, w):
            raise ValueError(f"crop width {q} leaves no image of a {h}x{w} input")
        return img[q:h - q, q:w - q]
    return img


def simulate_height(img, delta_p: int) -> np.ndarray:
    """Simulate a higher (``delta_p > 0``) or lower shooting height; same size out."""
    img = as_image(img)
    h, w = img.shape[:2]
    return resize(height_canvas(img, delta_p), h, w)


def simulate_height_labels(labels: np.ndarray, delta_p: int) -> np.ndarray:
    """Same geometry as :func:`simulate_height` for an integer label map."""
    h, w = labels.shape
    return resize_nearest(height_canvas(labels, delta_p), h, w)


def adjusted_height(h_drone: float, delta_p: int, lambda_aug: float = LAMBDA_AUG) -> float:
    h = h_drone + lambda_aug * delta_p
    if h <= 0:
        raise ValueError(f"adjusted height {h} is not positive")
    return h
