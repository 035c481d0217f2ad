"""Dense numeric substrate: feature maps, images, pooling and interpolation.

Feature maps are ``float32`` arrays shaped ``(channels, height, width)``.
Images are ``float32`` arrays shaped ``(height, width, 3)`` with values in
``[0, 1]``.  Nothing here mutates its inputs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


def as_tensor3(t) -> np.ndarray:
    """Validate and coerce ``t`` into a finite float32 ``(C, H, W)`` array."""
    arr = np.asarray(t, dtype=np.float32)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected a non-empty (C, H, W) tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def as_image(img) -> np.ndarray:
    """Validate and coerce ``img`` into a float32 ``(H, W, 3)`` array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def _axis_weights(n_in: int, n_out: int):
    # Half-pixel (align_corners=False) source coordinates, clamped at the borders.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def _lerp_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    lo, hi, frac = _axis_weights(n_in, n_out)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape).astype(arr.dtype)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * frac


def bilinear(arr: np.ndarray, out_h: int, out_w: int, axes=(0, 1)) -> np.ndarray:
    """Bilinear resampling of ``arr`` along the two spatial ``axes``.

    Uses the pixel-center convention (corner alignment disabled), so a
    resize to the same size is the identity and the output is always
    bracketed by the input's min and max.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    out = _lerp_axis(arr, axes[0], out_h)
    return _lerp_axis(out, axes[1], out_w)


def upsample4(t) -> np.ndarray:
    """Bilinear x4 spatial upsampling of a ``(C, H, W)`` feature map."""
    t = as_tensor3(t)
    _, h, w = t.shape
    return np.ascontiguousarray(bilinear(t, 4 * h, 4 * w, axes=(1, 2)), dtype=np.float32)


def resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an RGB image; values stay in [0, 1]."""
    img = as_image(img)
    out = bilinear(img, out_h, out_w, axes=(0, 1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D label map (pixel-center convention)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = arr.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[rows[:, None], cols[None, :]]


def channel_mean(t) -> np.ndarray:
    """Per-channel spatial mean, accumulated in float64."""
    t = np.asarray(t)
    flat = t.reshape(t.shape[0], -1)
    return flat.sum(axis=1, dtype=np.float64) / flat.shape[1]


def masked_average(t, mask) -> tuple[np.ndarray, bool]:
    """Per-channel mean of ``t`` over the pixels where ``mask`` is set.

    Returns ``(vector, empty)``.  When the mask selects no pixel the plain
    per-channel mean is returned instead and ``empty`` is True.
    """
    t = np.asarray(t)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != t.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match tensor spatial shape {t.shape[1:]}")
    count = int(mask.sum())
    if count == 0:
        return channel_mean(t), True
    # contiguous copy so the reduction order matches channel_mean exactly
    return channel_mean(np.ascontiguousarray(t[:, mask])), False


# -- FMAP1 container --------------------------------------------------------

def fmap_to_bytes(t) -> bytes:
    t = as_tensor3(t)
    c, h, w = t.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, c, h, w) + t.astype("<f4").tobytes(order="C")


def fmap_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one FMAP1 block at ``offset``; returns ``(tensor, next_offset)``."""
    magic, c, h, w = _FMAP_HEADER.unpack_from(buf, offset)
    if magic != FMAP_MAGIC:
        raise ValueError(f"bad FMAP magic {magic!r}")
    start = offset + _FMAP_HEADER.size
    end = start + 4 * c * h * w
    if end > len(buf):
        raise ValueError("truncated FMAP block")
    data = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=start)
    return data.astype(np.float32).reshape(c, h, w), end


def write_fmap(path, t) -> None:
    Path(path).write_bytes(fmap_to_bytes(t))


def read_fmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = fmap_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after FMAP block")
    return t


# -- PNG I/O ----------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img) -> None:
    PILImage.fromarray(to_uint8(as_image(img))).save(path)


def load_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 0xFFFF:
        raise ValueError("label ids must fit in 16 bits")
    PILImage.fromarray(labels.astype(np.uint16)).save(path)


def load_labels(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im).astype(np.int32)
