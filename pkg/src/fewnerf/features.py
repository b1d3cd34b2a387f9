"""Feature conditioning path: projection into source views, bilinear sampling,
multi-view aggregation, the learned projection to 256 dims, and multi-scale
fusion with softmax scale weights.

Feature maps travel as NFM1 files: magic "NFM1", then little-endian u32
version=1, height_f, width_f, dim, source_H, source_W, a u32-length-prefixed
UTF-8 view id, a u32 scale id, and height_f*width_f*dim float32 values in
row-major channel-last order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Camera

NFM_MAGIC = b"NFM1"


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMap:
    view_id: str
    scale_id: int
    data: np.ndarray  # (height_f, width_f, dim) float32
    source_size: tuple[int, int]  # (H, W) pixels of the originating image

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise FeatureError(f"feature map must be HxWxD, got {self.data.shape}")

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def write_nfm1(path, fmap: FeatureMap) -> None:
    hf, wf, dim = fmap.data.shape
    sh, sw = fmap.source_size
    name = fmap.view_id.encode("utf-8")
    out = bytearray()
    out += NFM_MAGIC
    out += struct.pack("<IIIIII", 1, hf, wf, dim, sh, sw)
    out += struct.pack("<I", len(name)) + name
    out += struct.pack("<I", fmap.scale_id)
    out += np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_nfm1(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    if buf[:4] != NFM_MAGIC:
        raise FeatureError(f"{path}: bad magic {buf[:4]!r}")
    version, hf, wf, dim, sh, sw = struct.unpack_from("<IIIIII", buf, 4)
    if version != 1:
        raise FeatureError(f"{path}: unsupported NFM version {version}")
    pos = 28
    (nlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    view_id = buf[pos:pos + nlen].decode("utf-8")
    pos += nlen
    (scale_id,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    count = hf * wf * dim
    if len(buf) - pos != 4 * count:
        raise FeatureError(
            f"{path}: payload {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return FeatureMap(view_id=view_id, scale_id=int(scale_id),
                      data=data.reshape(hf, wf, dim).copy(), source_size=(sh, sw))


def load_feature_dir(root) -> dict[str, dict[int, FeatureMap]]:
    """All NFM1 files under `root`, keyed by view id then scale id."""
    out: dict[str, dict[int, FeatureMap]] = {}
    for path in sorted(Path(root).glob("*.nfm")):
        fm = read_nfm1(path)
        out.setdefault(fm.view_id, {})[fm.scale_id] = fm
    return out


# ----------------------------------------------------------------------
# projection & sampling

def project(camera: Camera, points: np.ndarray
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into a source view. Returns (u, v, depth, in_bounds).

    u, v are pixel coordinates in the source image; depth is the positive
    distance along the optical axis. Points behind the camera or outside the
    image rectangle get in_bounds=False.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = camera.camera_to_world[:3, :3].astype(np.float64)
    trans = camera.camera_to_world[:3, 3].astype(np.float64)
    cam_pts = (pts - trans) @ rot  # R^T (x - t)
    z = cam_pts[:, 2]
    depth = -z
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * (cam_pts[:, 0] / depth) + camera.cx
        v = -camera.focal * (cam_pts[:, 1] / depth) + camera.cy
    in_bounds = ((depth > 1e-8)
                 & (u >= 0.0) & (u <= camera.width)
                 & (v >= 0.0) & (v <= camera.height))
    u = np.where(np.isfinite(u), u, 0.0)
    v = np.where(np.isfinite(v), v, 0.0)
    return (u.astype(np.float32), v.astype(np.float32),
            depth.astype(np.float32), in_bounds)


def bilinear_sample(fmap: FeatureMap | Tensor, u: np.ndarray, v: np.ndarray,
                    source_size: tuple[int, int] | None = None) -> Tensor:
    """4-neighbor bilinear interpolation with edge clamping; differentiable
    w.r.t. the feature grid.

    u, v are source-image pixel coordinates; they are scaled to the feature
    grid by (width_f / W, height_f / H) and then interpreted as texel-index
    coordinates (integer coordinate -> exact stored feature).
    """
    if isinstance(fmap, FeatureMap):
        grid = ad.as_tensor(fmap.data)
        source_size = fmap.source_size
    else:
        grid = fmap
        if source_size is None:
            raise FeatureError("source_size required when passing a raw grid")
    hf, wf, dim = grid.shape
    sh, sw = source_size
    gx = np.asarray(u, dtype=np.float64) * (wf / sw)
    gy = np.asarray(v, dtype=np.float64) * (hf / sh)
    gx = np.clip(gx, 0.0, wf - 1.0)
    gy = np.clip(gy, 0.0, hf - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    ax = (gx - x0).astype(np.float32)[:, None]
    ay = (gy - y0).astype(np.float32)[:, None]
    flat = ad.reshape(grid, (hf * wf, dim))
    f00 = ad.gather_rows(flat, y0 * wf + x0)
    f01 = ad.gather_rows(flat, y0 * wf + x1)
    f10 = ad.gather_rows(flat, y1 * wf + x0)
    f11 = ad.gather_rows(flat, y1 * wf + x1)
    top = ad.add(ad.mul(f00, 1.0 - ax), ad.mul(f01, ax))
    bot = ad.add(ad.mul(f10, 1.0 - ax), ad.mul(f11, ax))
    return ad.add(ad.mul(top, 1.0 - ay), ad.mul(bot, ay))


# ----------------------------------------------------------------------
# fusion parameters

AGGREGATIONS = ("weighted_average", "gated", "attention")


class FusionParams:
    """Learnable pieces of the conditioning path for one feature dimension.

    Holds the feature-to-MLP projection (dim -> out_dim), softmax logits over
    scales, and the strategy-specific aggregation parameters (gate MLP or
    multi-head attention with a learned query token).
    """

    def __init__(self, dim: int, rng: np.random.Generator, out_dim: int = 256,
                 n_scales: int = 1, aggregation: str = "weighted_average",
                 heads: int = 8, gate_hidden: int = 64, attn_dropout: float = 0.1):
        if aggregation not in AGGREGATIONS:
            raise FeatureError(f"unknown aggregation {aggregation!r}")
        if aggregation == "attention" and dim % heads != 0:
            raise FeatureError(f"feature dim {dim} not divisible by {heads} heads")
        from .model import kaiming_uniform

        self.dim = dim
        self.out_dim = out_dim
        self.n_scales = n_scales
        self.aggregation = aggregation
        self.heads = heads
        self.attn_dropout = attn_dropout
        p: dict[str, Tensor] = {
            "proj.w": Tensor(kaiming_uniform(rng, dim, out_dim), requires_grad=True),
            "proj.b": Tensor(np.zeros(out_dim, np.float32), requires_grad=True),
            "scale_logits": Tensor(np.zeros(n_scales, np.float32), requires_grad=True),
        }
        if aggregation == "gated":
            p["gate1.w"] = Tensor(kaiming_uniform(rng, dim, gate_hidden),
                                  requires_grad=True)
            p["gate1.b"] = Tensor(np.zeros(gate_hidden, np.float32), requires_grad=True)
            p["gate2.w"] = Tensor(kaiming_uniform(rng, gate_hidden, 1),
                                  requires_grad=True)
            p["gate2.b"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
        elif aggregation == "attention":
            for name in ("wq", "wk", "wv", "wo"):
                p[f"attn.{name}"] = Tensor(kaiming_uniform(rng, dim, dim),
                                           requires_grad=True)
            p["attn.query"] = Tensor(
                rng.normal(0.0, 0.02, size=dim).astype(np.float32),
                requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params


# ----------------------------------------------------------------------
# aggregation over views

def aggregate_views(feats: list[Tensor], in_bounds: np.ndarray,
                    params: FusionParams, train: bool = False,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, int]:
    """Combine per-view feature vectors into one vector per point.

    feats: V tensors of shape (P, dim); in_bounds: (V, P) bool. Points with no
    in-bounds view yield zeros; their count is returned for diagnostics.
    """
    if not feats:
        raise FeatureError("aggregate_views needs at least one view")
    n_views = len(feats)
    n_pts, dim = feats[0].shape
    in_bounds = np.asarray(in_bounds, dtype=bool).reshape(n_views, n_pts)
    mask = in_bounds.astype(np.float32)
    count = mask.sum(axis=0)
    n_empty = int((count == 0).sum())
    any_mask = (count > 0).astype(np.float32)[:, None]

    if params.aggregation == "weighted_average":
        inv = np.where(count > 0, 1.0 / np.maximum(count, 1e-8), 0.0)
        acc = None
        for i, f in enumerate(feats):
            term = ad.mul(f, mask[i][:, None])
            acc = term if acc is None else ad.add(acc, term)
        return ad.mul(acc, inv.astype(np.float32)[:, None]), n_empty

    p = params.params
    if params.aggregation == "gated":
        num = None
        den = None
        for i, f in enumerate(feats):
            h = ad.relu(ad.add(ad.matmul(f, p["gate1.w"]), p["gate1.b"]))
            g = ad.sigmoid(ad.add(ad.matmul(h, p["gate2.w"]), p["gate2.b"]))
            g = ad.mul(g, mask[i][:, None])  # (P,1)
            num = ad.mul(f, g) if num is None else ad.add(num, ad.mul(f, g))
            den = g if den is None else ad.add(den, g)
        out = ad.div(num, ad.add(den, 1e-8))
        return ad.mul(out, any_mask), n_empty

    # attention: one learned query token attends over in-bounds view features
    heads = params.heads
    dh = dim // heads
    scale = np.float32(1.0 / np.sqrt(dh))
    q = ad.matmul(ad.reshape(p["attn.query"], (1, dim)), p["attn.wq"])  # (1, dim)
    stacked = ad.concat([ad.reshape(f, (1, n_pts, dim)) for f in feats], axis=0)
    flat = ad.reshape(stacked, (n_views * n_pts, dim))
    k = ad.reshape(ad.matmul(flat, p["attn.wk"]), (n_views, n_pts, dim))
    v = ad.reshape(ad.matmul(flat, p["attn.wv"]), (n_views, n_pts, dim))
    neg = ((1.0 - mask) * np.float32(-1e9))[:, :, None]  # mask out-of-bounds views
    outs = []
    for h in range(heads):
        qh = ad.slice_axis(q, 1, h * dh, dh)            # (1, dh)
        kh = ad.slice_axis(k, 2, h * dh, dh)            # (V, P, dh)
        vh = ad.slice_axis(v, 2, h * dh, dh)
        scores = ad.mul(ad.reduce_sum(ad.mul(kh, ad.reshape(qh, (dh,))), axis=2,
                                      keepdims=True), scale)  # (V, P, 1)
        scores = ad.add(scores, neg)
        attn = ad.softmax(scores, axis=0)
        if train and params.attn_dropout > 0:
            if rng is None:
                raise FeatureError("attention dropout needs an rng in train mode")
            attn = ad.dropout(attn, params.attn_dropout, rng, train)
        outs.append(ad.reduce_sum(ad.mul(attn, vh), axis=0))  # (P, dh)
    merged = ad.concat(outs, axis=1)                     # (P, dim)
    out = ad.matmul(merged, p["attn.wo"])
    return ad.mul(out, any_mask), n_empty


def project_features(f: Tensor, params: FusionParams) -> Tensor:
    """Affine map from the feature dimension to the MLP conditioning width."""
    if f.shape[1] != params.dim:
        raise FeatureError(f"feature dim {f.shape[1]} != projection dim {params.dim}")
    return ad.add(ad.matmul(f, params.params["proj.w"]), params.params["proj.b"])


def fuse_scales(per_scale: list[Tensor], scale_logits: Tensor) -> Tensor:
    """Convex combination of per-scale features with softmax(logits) weights."""
    s = len(per_scale)
    if s == 0:
        raise FeatureError("fuse_scales needs at least one scale")
    if scale_logits.shape != (s,):
        raise FeatureError(
            f"scale_logits shape {scale_logits.shape} != ({s},)")
    dims = {f.shape for f in per_scale}
    if len(dims) != 1:
        raise FeatureError(f"scales disagree on shape: {sorted(dims)}")
    w = ad.softmax(ad.reshape(scale_logits, (1, s)), axis=1)
    out = None
    for i, f in enumerate(per_scale):
        ws = ad.reshape(ad.slice_axis(w, 1, i, 1), (1,))
        term = ad.mul(f, ws)
        out = term if out is None else ad.add(out, term)
    return out
