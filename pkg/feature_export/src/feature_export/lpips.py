"""LPIPS over directories of rendered images.

Standard recipe: VGG16 conv features at five depths, channel-unit-normalized,
squared differences averaged over space and channels, summed over layers.
Pretrained ImageNet weights are used when torchvision can provide them; if the
download is unavailable the same architecture is seeded deterministically and
the output JSON is marked uncalibrated. Either way identical images score
exactly 0.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .export import IMAGE_EXTS

# end of each VGG16 conv stage (after relu1_2 ... relu5_3)
STAGE_ENDS = [4, 9, 16, 23, 30]
# LPIPS input normalization (from the reference implementation)
SHIFT = torch.tensor([-0.030, -0.088, -0.188]).view(1, 3, 1, 1)
SCALE = torch.tensor([0.458, 0.448, 0.450]).view(1, 3, 1, 1)


class LpipsError(RuntimeError):
    pass


def _vgg_features() -> tuple[torch.nn.Module, str]:
    from torchvision.models import vgg16
    try:
        from torchvision.models import VGG16_Weights
        net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        source = "torchvision-imagenet"
    except Exception:
        torch.manual_seed(0)
        net = vgg16(weights=None)
        source = "random-seeded (uncalibrated)"
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net.features, source


def _load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def _stage_maps(features: torch.nn.Module, x: torch.Tensor):
    x = (x * 2.0 - 1.0 - SHIFT) / SCALE
    out = []
    for i, block in enumerate(features):
        x = block(x)
        if i in STAGE_ENDS:
            norm = x / torch.sqrt((x ** 2).sum(1, keepdim=True) + 1e-10)
            out.append(norm)
    return out


def lpips_pair(features: torch.nn.Module, a: torch.Tensor,
               b: torch.Tensor) -> float:
    with torch.no_grad():
        fa = _stage_maps(features, a)
        fb = _stage_maps(features, b)
    total = 0.0
    for xa, xb in zip(fa, fb):
        total += float(((xa - xb) ** 2).mean(dim=(1, 2, 3)))
    return total


def eval_lpips(pred_dir, target_dir) -> dict:
    """Per-view + mean LPIPS for matching filenames in two directories."""
    pred_dir, target_dir = Path(pred_dir), Path(target_dir)
    preds = {p.name: p for p in pred_dir.iterdir()
             if p.suffix.lower() in IMAGE_EXTS}
    targets = {p.name: p for p in target_dir.iterdir()
               if p.suffix.lower() in IMAGE_EXTS}
    if set(preds) != set(targets):
        only_p = sorted(set(preds) - set(targets))
        only_t = sorted(set(targets) - set(preds))
        raise LpipsError(
            f"filename mismatch: only in pred {only_p}, only in target {only_t}")
    if not preds:
        raise LpipsError("no images to compare")
    features, source = _vgg_features()
    per_view = {}
    for name in sorted(preds):
        a = _load_image(preds[name])
        b = _load_image(targets[name])
        if a.shape != b.shape:
            raise LpipsError(f"{name}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        per_view[name] = lpips_pair(features, a, b)
    return {
        "per_view": per_view,
        "mean": sum(per_view.values()) / len(per_view),
        "weights": source,
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
