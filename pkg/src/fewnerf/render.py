"""Ray generation, stratified sampling, and differentiable alpha compositing."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Camera


class RenderError(ValueError):
    pass


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rays through pixel centers for (row, col) pairs; unit world directions.

    Pinhole model: camera-space direction ((col+0.5-cx)/f, -(row+0.5-cy)/f, -1)
    rotated into world space; all origins are the camera position.
    """
    pixels = np.asarray(pixels)
    rows = pixels[:, 0].astype(np.float64)
    cols = pixels[:, 1].astype(np.float64)
    if (rows.min() < 0 or cols.min() < 0
            or rows.max() >= camera.height or cols.max() >= camera.width):
        raise RenderError(
            f"pixel outside {camera.height}x{camera.width} image bounds")
    x = (cols + 0.5 - camera.cx) / camera.focal
    y = -(rows + 0.5 - camera.cy) / camera.focal
    z = -np.ones_like(x)
    dirs_cam = np.stack([x, y, z], axis=1)
    rot = camera.camera_to_world[:3, :3].astype(np.float64)
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position.astype(np.float64), dirs.shape).copy()
    return origins.astype(np.float32), dirs.astype(np.float32)


def stratified_samples(near: float, far: float, n_rays: int, n_samples: int,
                       jitter: bool, rng: np.random.Generator | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray ascending depths, one sample per equal-width bin, plus deltas.

    jitter=False puts samples at bin centers. The terminal delta equals the
    bin width (far-near)/n rather than infinity.
    """
    if n_samples < 2:
        raise RenderError(f"need at least 2 samples per ray, got {n_samples}")
    if not near < far:
        raise RenderError(f"need near < far, got {near}, {far}")
    width = (far - near) / n_samples
    edges = near + width * np.arange(n_samples, dtype=np.float64)
    if jitter:
        if rng is None:
            raise RenderError("jittered sampling needs an rng")
        offs = rng.random((n_rays, n_samples))
    else:
        offs = np.full((n_rays, n_samples), 0.5)
    t = (edges[None, :] + offs * width).astype(np.float32)
    # float32 rounding can collapse adjacent samples across a bin edge
    deltas = np.maximum(np.diff(t, axis=1), np.float32(1e-6))
    deltas = np.concatenate(
        [deltas, np.full((n_rays, 1), width, dtype=np.float32)], axis=1)
    return t, deltas


def sample_points(origins: np.ndarray, dirs: np.ndarray,
                  t: np.ndarray) -> np.ndarray:
    """World-space sample positions, shape (rays, samples, 3)."""
    return (origins[:, None, :] + t[..., None] * dirs[:, None, :]).astype(np.float32)


def composite(colors: Tensor, sigmas: Tensor, deltas: np.ndarray,
              background: np.ndarray | None = None
              ) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite per-sample colors along each ray.

    colors: (R, S, 3) tensor, sigmas: (R, S) tensor, deltas: (R, S) array.
    Returns (pixel (R,3), weights (R,S), end transmittance (R,1)). Uses
    alpha_i = -expm1(-sigma_i * delta_i) and float64 cumulative products for
    the transmittance chain. When `background` is given, the pixel receives
    end_transmittance * background.
    """
    deltas = np.asarray(deltas, dtype=np.float32)
    if np.any(sigmas.data < 0):
        raise RenderError("negative sigma passed to composite")
    if np.any(deltas <= 0):
        raise RenderError("non-positive delta passed to composite")
    n_rays, n_samples = sigmas.shape
    sd = ad.mul(sigmas, deltas)
    alpha = -ad.expm1(-sd)                      # 1 - exp(-sigma*delta)
    one_minus = 1.0 - alpha
    cp = ad.cumprod(one_minus, axis=1)          # cp_i = prod_{j<=i} (1-alpha_j)
    ones = Tensor(np.ones((n_rays, 1), dtype=np.float32))
    trans = ad.concat([ones, ad.slice_axis(cp, 1, 0, n_samples - 1)], axis=1)
    weights = ad.mul(trans, alpha)
    pixel = ad.reduce_sum(ad.mul(ad.reshape(weights, (n_rays, n_samples, 1)), colors),
                          axis=1)
    trans_end = ad.slice_axis(cp, 1, n_samples - 1, 1)
    if background is not None:
        bg = np.asarray(background, dtype=np.float32)
        pixel = ad.add(pixel, ad.mul(trans_end, bg))
    return pixel, weights, trans_end
