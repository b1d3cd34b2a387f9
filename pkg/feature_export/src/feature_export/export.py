"""Dense feature export: run images through a frozen DINOv2 backbone at one or
more input resolutions and write the patch-token grids as NFM1 files.

The CLS token is dropped; only patch tokens form the spatial grid. Last-layer
features are exported by default; --layer selects an earlier block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .nfm import FeatureMap, write_nfm1

DEFAULT_MODEL = "facebook/dinov2-base"
DEFAULT_SCALES = [224, 448, 896]
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
# ImageNet normalization, as used by the DINOv2 image processor
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    images: list[Path]
    out_dir: Path
    model: str = DEFAULT_MODEL
    scales: list[int] = field(default_factory=lambda: list(DEFAULT_SCALES))
    layer: int | None = None  # None = final (post-norm) layer

    def __post_init__(self):
        if not self.images:
            raise ExportError("no input images")
        if not self.scales:
            raise ExportError("no scales")


def find_images(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.iterdir()
                  if p.suffix.lower() in IMAGE_EXTS)


def load_backbone(model: str = DEFAULT_MODEL) -> torch.nn.Module:
    """Frozen eval-mode DINOv2 backbone from a hub id or a local directory."""
    from transformers import Dinov2Model
    try:
        net = Dinov2Model.from_pretrained(model)
    except Exception as e:
        raise ExportError(f"cannot load model {model!r}: {e}") from e
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def preprocess(image: Image.Image, scale: int) -> torch.Tensor:
    """Resize to scale x scale, normalize, return a 1x3xSxS float tensor."""
    rgb = image.convert("RGB").resize((scale, scale), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - MEAN) / STD
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def extract_grid(net: torch.nn.Module, pixels: torch.Tensor,
                 layer: int | None = None) -> np.ndarray:
    """Patch-token grid (g, g, dim) for one preprocessed image."""
    patch = net.config.patch_size
    side = pixels.shape[-1]
    if side % patch:
        raise ExportError(f"input side {side} not divisible by patch {patch}")
    g = side // patch
    with torch.no_grad():
        out = net(pixels, output_hidden_states=layer is not None)
    tokens = (out.last_hidden_state if layer is None
              else out.hidden_states[layer])
    tokens = tokens[0, 1:]  # drop CLS
    if tokens.shape[0] != g * g:
        raise ExportError(
            f"expected {g * g} patch tokens, got {tokens.shape[0]}")
    return tokens.reshape(g, g, -1).numpy().astype(np.float32)


def export_features(job: ExportJob, log=print) -> list[Path]:
    """One NFM1 file per image per scale; deterministic given the checkpoint.

    scale_id is the index into the sorted scale list, so the smallest input
    resolution gets id 0.
    """
    net = load_backbone(job.model)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    scales = sorted(set(job.scales))
    written = []
    for img_path in job.images:
        try:
            image = Image.open(img_path)
        except Exception as e:
            raise ExportError(f"cannot read {img_path}: {e}") from e
        src_h, src_w = image.height, image.width
        for scale_id, scale in enumerate(scales):
            grid = extract_grid(net, preprocess(image, scale), job.layer)
            fmap = FeatureMap(view_id=img_path.stem, scale_id=scale_id,
                              data=grid, source_size=(src_h, src_w))
            out_path = job.out_dir / f"{img_path.stem}_s{scale_id}.nfm"
            write_nfm1(out_path, fmap)
            written.append(out_path)
            if log:
                log(f"{img_path.name} @ {scale} -> {out_path.name} "
                    f"({grid.shape[0]}x{grid.shape[1]}x{grid.shape[2]})")
    return written
