"""Small numpy geometry helpers used by the data pipeline.

Resizes use the half-pixel center convention (src = (dst + 0.5) * scale - 0.5),
the same convention as OpenCV's INTER_LINEAR / INTER_NEAREST, so they can be
cross-checked against an independent implementation.
"""

from __future__ import annotations

import numpy as np


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample a 2D array to (out_h, out_w)."""
    if img.ndim != 2:
        raise ValueError(f"expected 2D array, got shape {img.shape}")
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float64).copy()

    src = img.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of a 2D array to (out_h, out_w)."""
    if img.ndim != 2:
        raise ValueError(f"expected 2D array, got shape {img.shape}")
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = np.clip(((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5).round(), 0, in_h - 1).astype(np.int64)
    xs = np.clip(((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5).round(), 0, in_w - 1).astype(np.int64)
    return img[np.ix_(ys, xs)]


def resize_mask(mask: np.ndarray, out_h: int, out_w: int, threshold: float = 0.5) -> np.ndarray:
    """Resize a binary mask: bilinear on the float mask, then re-binarize."""
    soft = resize_bilinear(mask.astype(np.float64), out_h, out_w)
    return (soft >= threshold).astype(mask.dtype)


def pad_to_square(img: np.ndarray, side: int) -> np.ndarray:
    """Zero-pad a 2D array at the bottom/right up to side x side."""
    h, w = img.shape
    if h > side or w > side:
        raise ValueError(f"image {img.shape} exceeds target side {side}")
    out = np.zeros((side, side), dtype=img.dtype)
    out[:h, :w] = img
    return out


def fit_to_side(img: np.ndarray, side: int) -> np.ndarray:
    """Scale the longest edge to `side` (bilinear), then zero-pad to square."""
    h, w = img.shape
    scale = side / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    return pad_to_square(resize_bilinear(img, nh, nw).astype(img.dtype, copy=False), side)
