"""Sinusoidal positional encoding and the shared NeRF MLP.

One backbone serves all variants: 8 trunk layers of 256 units with a skip
re-concatenation at layer 4, a direction-free density head, and a color head
that sees the encoded viewing direction through one 128-unit hidden layer.
Feature-conditioned variants concatenate a 256-d conditioning vector onto the
encoded position at the input (and again at the skip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.l_pos < 1 or self.l_dir < 1:
            raise ValueError("frequency band counts must be >= 1")

    def pos_dim(self, n: int = 3) -> int:
        return n * (2 * self.l_pos + int(self.include_input))

    def dir_dim(self, n: int = 3) -> int:
        return n * (2 * self.l_dir + int(self.include_input))


def positional_encoding(v: np.ndarray, l: int, include_input: bool = True) -> np.ndarray:
    """[v?, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{l-1} pi v), cos(...)]."""
    v = np.asarray(v, dtype=np.float32)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    parts = [v] if include_input else []
    for k in range(l):
        freq = np.float32((2.0 ** k) * np.pi)
        parts.append(np.sin(freq * v))
        parts.append(np.cos(freq * v))
    out = np.concatenate(parts, axis=1).astype(np.float32)
    return out[0] if squeeze else out


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class MlpConfig:
    depth: int = 8
    width: int = 256
    skip_layer: int = 4
    conditioning_dim: int = 0
    color_hidden: int = 128
    dropout: float = 0.1
    encoding: EncodingConfig = field(default_factory=EncodingConfig)


class NerfMlp:
    """F(enc_x, enc_d [, cond]) -> (rgb in [0,1]^3, sigma >= 0)."""

    def __init__(self, config: MlpConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.in_dim = c.encoding.pos_dim() + c.conditioning_dim
        self.dir_dim = c.encoding.dir_dim()
        p: dict[str, Tensor] = {}

        def linear(name, fan_in, fan_out):
            p[f"{name}.w"] = Tensor(kaiming_uniform(rng, fan_in, fan_out),
                                    requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(fan_out, np.float32), requires_grad=True)

        for i in range(c.depth):
            fan_in = self.in_dim if i == 0 else c.width
            if i == c.skip_layer:
                fan_in = c.width + self.in_dim
            linear(f"trunk{i}", fan_in, c.width)
        linear("sigma", c.width, 1)
        linear("feat", c.width, c.width)
        linear("color1", c.width + self.dir_dim, c.color_hidden)
        linear("color2", c.color_hidden, 3)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, enc_x: np.ndarray | Tensor, enc_d: np.ndarray | Tensor,
                cond: Tensor | None = None, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        c = self.config
        enc_x = ad.as_tensor(enc_x)
        enc_d = ad.as_tensor(enc_d)
        if c.conditioning_dim > 0:
            if cond is None:
                raise ValueError("model expects a conditioning vector")
            if cond.shape[1] != c.conditioning_dim:
                raise ValueError(
                    f"conditioning dim {cond.shape[1]} != {c.conditioning_dim}")
            x_in = ad.concat([enc_x, cond], axis=1)
        else:
            if cond is not None:
                raise ValueError("baseline model takes no conditioning vector")
            x_in = enc_x
        if x_in.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x_in.shape[1]} != expected {self.in_dim}")
        if enc_d.shape[1] != self.dir_dim:
            raise ValueError(f"direction dim {enc_d.shape[1]} != {self.dir_dim}")
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")

        p = self.params
        h = x_in
        for i in range(c.depth):
            if i == c.skip_layer:
                h = ad.concat([h, x_in], axis=1)
            h = ad.relu(ad.add(ad.matmul(h, p[f"trunk{i}.w"]), p[f"trunk{i}.b"]))
            if train and c.dropout > 0:
                h = ad.dropout(h, c.dropout, rng, train)
        sigma = ad.relu(ad.add(ad.matmul(h, p["sigma.w"]), p["sigma.b"]))
        feat = ad.add(ad.matmul(h, p["feat.w"]), p["feat.b"])
        ch = ad.relu(ad.add(ad.matmul(ad.concat([feat, enc_d], axis=1),
                                      p["color1.w"]), p["color1.b"]))
        rgb = ad.sigmoid(ad.add(ad.matmul(ch, p["color2.w"]), p["color2.b"]))
        return rgb, sigma
