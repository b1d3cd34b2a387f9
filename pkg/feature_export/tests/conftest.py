import numpy as np
import pytest
import torch
from PIL import Image


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    """A small local DINOv2 checkpoint: real architecture (768-dim, patch 14)
    at reduced depth, seeded weights, saved to disk like any other checkpoint.
    """
    from transformers import Dinov2Config, Dinov2Model
    cfg = Dinov2Config(hidden_size=768, num_hidden_layers=2,
                       num_attention_heads=12, intermediate_size=1536,
                       patch_size=14, image_size=224)
    torch.manual_seed(0)
    model = Dinov2Model(cfg)
    out = tmp_path_factory.mktemp("ckpt") / "dinov2-small-depth"
    model.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Three deterministic RGB test images of different sizes."""
    out = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    for name, size in [("view_a", 48), ("view_b", 64), ("view_c", 96)]:
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(out / f"{name}.png")
    return out
