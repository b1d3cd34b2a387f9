"""Plain numpy image resampling helpers (deterministic, no external deps)."""

from __future__ import annotations

import numpy as np


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) or (H, W) array, align-corners=False."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    out = out.astype(np.float32)
    return out[..., 0] if squeeze else out


def downsample_average(img: np.ndarray, factor: int) -> np.ndarray:
    """Exact box-filter downsampling by an integer factor."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    shaped = img.reshape(h // factor, factor, w // factor, factor, -1)
    out = shaped.mean(axis=(1, 3))
    if img.ndim == 2:
        out = out[..., 0]
    return out.astype(np.float32)
