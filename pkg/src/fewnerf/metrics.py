"""PSNR and SSIM on float images in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    psnr_per_view: list[float] = field(default_factory=list)
    ssim_per_view: list[float] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.psnr_per_view)) if self.psnr_per_view else math.nan

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_per_view)) if self.ssim_per_view else math.nan

    def to_dict(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "psnr_per_view": self.psnr_per_view,
            "ssim_per_view": self.ssim_per_view,
        }


def psnr(pred: np.ndarray, target: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE) over all pixels and channels; inf when equal."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"psnr: shapes {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-D kernel applied on both axes."""
    w = kernel.size
    h, wd = img.shape
    out = np.zeros((h, wd - w + 1), dtype=np.float64)
    for j in range(w):
        out += kernel[j] * img[:, j:j + wd - w + 1]
    out2 = np.zeros((h - w + 1, wd - w + 1), dtype=np.float64)
    for i in range(w):
        out2 += kernel[i] * out[i:i + h - w + 1, :]
    return out2


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: int, sigma: float,
                  k1: float, k2: float, max_val: float) -> float:
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    mu_a = _filter2(a, kern)
    mu_b = _filter2(b, kern)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = _filter2(a * a, kern) - mu_aa
    var_b = _filter2(b * b, kern) - mu_bb
    cov = _filter2(a * b, kern) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred: np.ndarray, target: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """Gaussian-windowed SSIM, computed per channel and averaged."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"ssim: shapes {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        target = target[..., None]
    h, w = pred.shape[:2]
    if h < window or w < window:
        raise ValueError(f"ssim: image {h}x{w} smaller than window {window}")
    scores = [
        _ssim_channel(pred[..., c], target[..., c], window, sigma, k1, k2, max_val)
        for c in range(pred.shape[2])
    ]
    return float(np.mean(scores))
