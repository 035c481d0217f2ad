"""Saliency-guided refinement of part-level features.

Each part is split into a global, a salient and a background descriptor.
Saliency comes from the channel-mean activation, min-max normalised and
averaged with a center-peaked coordinate map, then thresholded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .tensor import channel_mean, masked_average

METRICS = ("chebyshev", "euclidean", "manhattan")
DEFAULT_DELTA = 0.5
DEFAULT_METRIC = "chebyshev"


@dataclass(frozen=True)
class SgrsOutput:
    global_vec: np.ndarray
    salient_vec: np.ndarray
    background_vec: np.ndarray
    empty_salient: bool
    empty_background: bool
    count_salient: int = 0
    count_background: int = 0

    def stacked(self) -> np.ndarray:
        """``(3, C)`` array in (global, salient, background) order."""
        return np.stack([self.global_vec, self.salient_vec, self.background_vec])


def coordinate_map(h: int, w: int, metric: str = DEFAULT_METRIC) -> np.ndarray:
    """Center-peaked prior: 1 at the center pixel, 0 at the farthest pixel.

    The center sits at ``((h-1)/2, (w-1)/2)`` so the map is flip-symmetric.
    On even-sized maps no pixel sits on the center and the peak is below 1.
    """
    if h < 1 or w < 1:
        raise ValueError("coordinate map needs a positive size")
    du = np.abs(np.arange(h, dtype=np.float64) - (h - 1) / 2)[:, None]
    dv = np.abs(np.arange(w, dtype=np.float64) - (w - 1) / 2)[None, :]
    if metric == "chebyshev":
        d = np.maximum(du, dv)
    elif metric == "euclidean":
        d = np.sqrt(du ** 2 + dv ** 2)
    elif metric == "manhattan":
        d = du + dv
    else:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    d_max = d.max()
    if d_max == 0:
        return np.ones((h, w))
    return 1.0 - d / d_max


def normalize_minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def heatmap(part: np.ndarray, cm: np.ndarray | None) -> np.ndarray:
    """Saliency heatmap in [0, 1]; ``cm=None`` gives the variant without a prior."""
    part = np.asarray(part)
    if cm is not None and cm.shape != part.shape[1:]:
        raise ValueError(f"coordinate map shape {cm.shape} != part shape {part.shape[1:]}")
    act = part.mean(axis=0, dtype=np.float64)
    n = normalize_minmax(act)
    if cm is None:
        return n
    return (n + cm) / 2.0


def binarize(heat: np.ndarray, delta: float = DEFAULT_DELTA) -> np.ndarray:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {delta}")
    return np.asarray(heat) >= delta


def sgrs_split(part: np.ndarray, mask: np.ndarray) -> SgrsOutput:
    """Global / salient / background averages of ``part`` under ``mask``.

    An empty salient or background region falls back to the global average
    and raises the matching ``empty_*`` flag.
    """
    part = np.asarray(part)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != part.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} != part shape {part.shape[1:]}")
    g = channel_mean(part)
    s, empty_s = masked_average(part, mask)
    b, empty_b = masked_average(part, ~mask)
    n_s = int(mask.sum())
    return SgrsOutput(
        global_vec=g,
        salient_vec=g if empty_s else s,
        background_vec=g if empty_b else b,
        empty_salient=empty_s,
        empty_background=empty_b,
        count_salient=n_s,
        count_background=mask.size - n_s,
    )


def refine_part(part: np.ndarray, delta: float = DEFAULT_DELTA,
                metric: str | None = DEFAULT_METRIC) -> SgrsOutput:
    """Heatmap, threshold and split one part; ``metric=None`` drops the prior."""
    _, h, w = part.shape
    cm = coordinate_map(h, w, metric) if metric is not None else None
    return sgrs_split(part, binarize(heatmap(part, cm), delta))


def save_gray_png(path, values) -> None:
    """Write a [0, 1] heatmap or a binary mask as 8-bit grayscale."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)
