"""Compact vision transformer (MiniViT) with LoRA adapters on the attention
query and value projections.

Base weights are always frozen; only the low-rank (A, B) pairs train. With B
initialized to zero the adapted forward pass is bit-identical to the base
forward pass, which is what lets the LoRA variant start from the frozen
variant's behavior.

Base weights persist as MVW1 files (shared blob container, magic "MVW1").
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binio import read_blob_file, write_blob_file
from .imageops import resize_bilinear
from .model import kaiming_uniform

MVW_MAGIC = b"MVW1"


class VitError(ValueError):
    pass


@dataclass
class MiniViTConfig:
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    # kept small so the largest multiscale input (4x base) stays at 16x16
    # patches; token count grows quadratically with resolution
    base_resolution: int = 32

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise VitError(f"embed_dim {self.embed_dim} not divisible by "
                           f"{self.heads} heads")
        if self.base_resolution % self.patch_size:
            raise VitError("base_resolution must be divisible by patch_size")


@dataclass
class LoraAdapter:
    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)
    rank: int
    scaling: float

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int,
               rng: np.random.Generator, alpha: float | None = None) -> "LoraAdapter":
        if rank < 1:
            raise VitError(f"rank must be >= 1, got {rank}")
        rank = min(rank, d_in, d_out)
        if alpha is None:
            alpha = float(rank)  # net scaling 1.0
        a = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(np.float32),
                   requires_grad=True)
        b = Tensor(np.zeros((d_out, rank), np.float32), requires_grad=True)
        return cls(a=a, b=b, rank=rank, scaling=alpha / rank)


def lora_linear(x: Tensor, w: Tensor, b: Tensor | None,
                adapter: LoraAdapter | None) -> Tensor:
    """x @ (W0 + scaling * (B A).T-composition) + b without materializing BA."""
    d_in, d_out = w.shape
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    if adapter is not None:
        if adapter.a.shape[1] != d_in or adapter.b.shape[0] != d_out:
            raise VitError(
                f"adapter dims {adapter.a.shape}/{adapter.b.shape} do not fit "
                f"a {d_in}x{d_out} base weight")
        low = ad.matmul(x, ad.transpose(adapter.a))        # (n, r)
        out = ad.add(out, ad.mul(ad.matmul(low, ad.transpose(adapter.b)),
                                 adapter.scaling))
    return out


class MiniViT:
    """Patch embedding -> pre-LN transformer blocks -> per-patch feature grid."""

    def __init__(self, config: MiniViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: MiniViTConfig, seed: int = 0) -> "MiniViT":
        """Deterministic seed-generated base weights (stand-in for pretraining)."""
        rng = ad.make_rng(seed)
        c = config
        d = c.embed_dim
        n_base = (c.base_resolution // c.patch_size) ** 2
        p: dict[str, Tensor] = {}

        def w(name, fan_in, fan_out):
            p[name] = Tensor(kaiming_uniform(rng, fan_in, fan_out))

        def vec(name, n, value=0.0):
            p[name] = Tensor(np.full(n, value, np.float32))

        w("patch.w", c.patch_size * c.patch_size * 3, d)
        vec("patch.b", d)
        p["pos"] = Tensor(rng.normal(0.0, 0.02, size=(n_base, d)).astype(np.float32))
        for i in range(c.depth):
            vec(f"blk{i}.ln1.g", d, 1.0)
            vec(f"blk{i}.ln1.b", d)
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"blk{i}.{proj}", d, d)
            for proj in ("bq", "bk", "bv", "bo"):
                vec(f"blk{i}.{proj}", d)
            vec(f"blk{i}.ln2.g", d, 1.0)
            vec(f"blk{i}.ln2.b", d)
            w(f"blk{i}.mlp1.w", d, c.mlp_ratio * d)
            vec(f"blk{i}.mlp1.b", c.mlp_ratio * d)
            w(f"blk{i}.mlp2.w", c.mlp_ratio * d, d)
            vec(f"blk{i}.mlp2.b", d)
        vec("ln.g", d, 1.0)
        vec("ln.b", d)
        return cls(config, p)

    # persistence -------------------------------------------------------
    def save(self, path) -> None:
        write_blob_file(path, MVW_MAGIC, asdict(self.config),
                        {k: t.data for k, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "MiniViT":
        _, cfg, arrays = read_blob_file(path, MVW_MAGIC)
        config = MiniViTConfig(**cfg)
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, "<f4").tobytes())
        return h.hexdigest()

    def make_adapters(self, rank: int = 16, seed: int = 0,
                      alpha: float | None = None) -> dict[str, LoraAdapter]:
        """Fresh adapters for the q and v projections of every block."""
        rng = ad.make_rng(seed)
        d = self.config.embed_dim
        out = {}
        for i in range(self.config.depth):
            for proj in ("q", "v"):
                out[f"blk{i}.{proj}"] = LoraAdapter.create(d, d, rank, rng,
                                                           alpha=alpha)
        return out

    # forward -----------------------------------------------------------
    def _pos_for(self, grid_h: int, grid_w: int) -> np.ndarray:
        c = self.config
        g0 = c.base_resolution // c.patch_size
        pos = self.params["pos"].data
        if (grid_h, grid_w) == (g0, g0):
            return pos
        grid = pos.reshape(g0, g0, c.embed_dim)
        return resize_bilinear(grid, grid_h, grid_w).reshape(grid_h * grid_w,
                                                             c.embed_dim)

    def forward(self, image: np.ndarray,
                adapters: dict[str, LoraAdapter] | None = None,
                train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Per-patch features of an (H, W, 3) image as a (H/p, W/p, d) grid."""
        del train, rng  # the backbone itself is deterministic
        c = self.config
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise VitError(f"expected HxWx3 image, got {img.shape}")
        h, w = img.shape[:2]
        if h % c.patch_size or w % c.patch_size:
            raise VitError(
                f"image {h}x{w} not divisible by patch size {c.patch_size}")
        gh, gw = h // c.patch_size, w // c.patch_size
        n = gh * gw
        d = c.embed_dim
        dh = d // c.heads
        patches = (img.reshape(gh, c.patch_size, gw, c.patch_size, 3)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(n, c.patch_size * c.patch_size * 3))
        p = self.params
        tokens = ad.add(ad.matmul(Tensor(patches), p["patch.w"]), p["patch.b"])
        tokens = ad.add(tokens, Tensor(self._pos_for(gh, gw)))
        adapters = adapters or {}
        scale = np.float32(1.0 / np.sqrt(dh))
        for i in range(c.depth):
            hnorm = ad.add(ad.mul(ad.layer_norm(tokens), p[f"blk{i}.ln1.g"]),
                           p[f"blk{i}.ln1.b"])
            q = lora_linear(hnorm, p[f"blk{i}.wq"], p[f"blk{i}.bq"],
                            adapters.get(f"blk{i}.q"))
            k = lora_linear(hnorm, p[f"blk{i}.wk"], p[f"blk{i}.bk"], None)
            v = lora_linear(hnorm, p[f"blk{i}.wv"], p[f"blk{i}.bv"],
                            adapters.get(f"blk{i}.v"))
            head_outs = []
            for hd in range(c.heads):
                qh = ad.slice_axis(q, 1, hd * dh, dh)
                kh = ad.slice_axis(k, 1, hd * dh, dh)
                vh = ad.slice_axis(v, 1, hd * dh, dh)
                attn = ad.softmax(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale),
                                  axis=-1)
                head_outs.append(ad.matmul(attn, vh))
            merged = ad.concat(head_outs, axis=1)
            attn_out = ad.add(ad.matmul(merged, p[f"blk{i}.wo"]), p[f"blk{i}.bo"])
            tokens = ad.add(tokens, attn_out)
            hnorm = ad.add(ad.mul(ad.layer_norm(tokens), p[f"blk{i}.ln2.g"]),
                           p[f"blk{i}.ln2.b"])
            mlp = ad.relu(ad.add(ad.matmul(hnorm, p[f"blk{i}.mlp1.w"]),
                                 p[f"blk{i}.mlp1.b"]))
            mlp = ad.add(ad.matmul(mlp, p[f"blk{i}.mlp2.w"]), p[f"blk{i}.mlp2.b"])
            tokens = ad.add(tokens, mlp)
        tokens = ad.add(ad.mul(ad.layer_norm(tokens), p["ln.g"]), p["ln.b"])
        return ad.reshape(tokens, (gh, gw, d))


def adapter_parameters(adapters: dict[str, LoraAdapter]) -> dict[str, Tensor]:
    out = {}
    for name, ad_ in sorted(adapters.items()):
        out[f"lora.{name}.a"] = ad_.a
        out[f"lora.{name}.b"] = ad_.b
    return out


def adapter_parameter_count(adapters: dict[str, LoraAdapter]) -> int:
    return sum(t.size for t in adapter_parameters(adapters).values())


def base_parameter_count(vit: MiniViT) -> int:
    return sum(t.size for t in vit.params.values())
