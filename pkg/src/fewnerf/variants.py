"""Assembly of the four model variants around the shared NeRF backbone.

baseline    - MLP only, no conditioning.
frozen      - conditioning from feature maps loaded once from NFM1 files.
lora        - conditioning from MiniViT features with trainable LoRA adapters.
multiscale  - LoRA features at several input resolutions, fused with learned
              softmax scale weights.

Conditioning path per 3D point: project into every training view, bilinearly
sample that view's feature grid, aggregate across views, fuse scales, then
apply the learned projection to the MLP conditioning width.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Scene, View
from .features import (FeatureError, FeatureMap, FusionParams, aggregate_views,
                       bilinear_sample, fuse_scales, load_feature_dir, project,
                       project_features)
from .imageops import resize_bilinear
from .model import EncodingConfig, MlpConfig, NerfMlp, positional_encoding
from .render import composite, sample_points, stratified_samples
from .vit import LoraAdapter, MiniViT, MiniViTConfig, adapter_parameters

VARIANTS = ("baseline", "frozen", "lora", "multiscale")


class VariantError(ValueError):
    pass


class VariantModel:
    def __init__(self, variant: str, mlp: NerfMlp, pos_scale: float,
                 train_views: list[View],
                 fusion: FusionParams | None = None,
                 vit: MiniViT | None = None,
                 adapters: dict[str, LoraAdapter] | None = None,
                 frozen_maps: dict[str, list[FeatureMap]] | None = None,
                 scales: list[int] | None = None):
        self.variant = variant
        self.mlp = mlp
        self.pos_scale = float(pos_scale)
        self.train_views = train_views
        self.fusion = fusion
        self.vit = vit
        self.adapters = adapters
        self.frozen_maps = frozen_maps
        self.scales = scales or []
        self.oob_points = 0  # points with no in-bounds source view (diagnostic)
        self._frozen_grid_cache: dict[str, list[tuple[Tensor, tuple[int, int]]]] | None = None

    # construction ------------------------------------------------------
    @classmethod
    def create(cls, variant: str, scene: Scene, seed: int = 0,
               conditioning_dim: int = 256,
               aggregation: str = "weighted_average",
               lora_rank: int = 16,
               dropout: float = 0.1,
               mlp_config: MlpConfig | None = None,
               vit_config: MiniViTConfig | None = None,
               vit_weights: str | None = None,
               features_dir: str | None = None,
               scales: list[int] | None = None) -> "VariantModel":
        if variant not in VARIANTS:
            raise VariantError(f"unknown variant {variant!r}")
        train_views = sorted(scene.split("train"), key=lambda v: v.id)
        pos_scale = scene.far / 2.0
        seq = np.random.SeedSequence(seed)
        mlp_rng, fusion_rng, adapter_seed = seq.spawn(3)
        cond = 0 if variant == "baseline" else conditioning_dim
        if mlp_config is None:
            mlp_config = MlpConfig(conditioning_dim=cond, dropout=dropout)
        else:
            mlp_config.conditioning_dim = cond
        mlp = NerfMlp(mlp_config, np.random.Generator(np.random.PCG64(mlp_rng)))

        if variant == "baseline":
            return cls(variant, mlp, pos_scale, train_views)

        frng = np.random.Generator(np.random.PCG64(fusion_rng))
        if variant == "frozen":
            if features_dir is None:
                raise VariantError("frozen variant requires a feature directory")
            by_view = load_feature_dir(features_dir)
            missing = [v.id for v in train_views if v.id not in by_view]
            if missing:
                raise VariantError(
                    f"missing feature maps for train views: {', '.join(missing)}")
            frozen_maps = {}
            for v in train_views:
                scale_ids = sorted(by_view[v.id])
                # single-scale conditioning: lowest scale id wins
                frozen_maps[v.id] = [by_view[v.id][scale_ids[0]]]
            dim = frozen_maps[train_views[0].id][0].dim
            fusion = FusionParams(dim, frng, out_dim=conditioning_dim,
                                  n_scales=1, aggregation=aggregation)
            return cls(variant, mlp, pos_scale, train_views, fusion=fusion,
                       frozen_maps=frozen_maps)

        # lora / multiscale
        if vit_weights is not None:
            vit = MiniViT.load(vit_weights)
        else:
            vit = MiniViT.create(vit_config or MiniViTConfig(), seed=seed)
        adapters = vit.make_adapters(rank=lora_rank,
                                     seed=adapter_seed.generate_state(1)[0])
        base = vit.config.base_resolution
        if scales is None:
            scales = [base] if variant == "lora" else [base, 2 * base, 4 * base]
        n_scales = len(scales)
        fusion = FusionParams(vit.config.embed_dim, frng,
                              out_dim=conditioning_dim, n_scales=n_scales,
                              aggregation=aggregation)
        return cls(variant, mlp, pos_scale, train_views, fusion=fusion, vit=vit,
                   adapters=adapters, scales=scales)

    # parameters --------------------------------------------------------
    def trainable_params(self) -> dict[str, Tensor]:
        params = {f"mlp.{k}": v for k, v in self.mlp.parameters().items()}
        if self.variant == "baseline":
            return params
        params.update({f"fusion.{k}": v for k, v in self.fusion.parameters().items()})
        if self.variant in ("lora", "multiscale"):
            params.update(adapter_parameters(self.adapters))
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to restore the model (includes frozen ViT base)."""
        out = {k: v.data.copy() for k, v in self.trainable_params().items()}
        if self.vit is not None:
            out.update({f"vit.{k}": v.data.copy()
                        for k, v in self.vit.params.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        targets = self.trainable_params()
        if self.vit is not None:
            targets = dict(targets)
            targets.update({f"vit.{k}": v for k, v in self.vit.params.items()})
        for name, tensor in targets.items():
            if name not in arrays:
                raise VariantError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != tensor.shape:
                raise VariantError(
                    f"checkpoint parameter {name!r} has shape "
                    f"{arrays[name].shape}, model expects {tensor.shape}")
            tensor.data = arrays[name].astype(np.float32).copy()

    # conditioning ------------------------------------------------------
    def _frozen_grids(self) -> dict[str, list[tuple[Tensor, tuple[int, int]]]]:
        if self._frozen_grid_cache is None:
            with ad.no_grad():
                self._frozen_grid_cache = {
                    vid: [(Tensor(fm.data), fm.source_size) for fm in fms]
                    for vid, fms in self.frozen_maps.items()
                }
        return self._frozen_grid_cache

    def feature_grids(self, train: bool = False,
                      rng: np.random.Generator | None = None
                      ) -> dict[str, list[tuple[Tensor, tuple[int, int]]]] | None:
        """Per-view, per-scale feature grids for the current parameters."""
        if self.variant == "baseline":
            return None
        if self.variant == "frozen":
            return self._frozen_grids()
        grids: dict[str, list[tuple[Tensor, tuple[int, int]]]] = {}
        for view in self.train_views:
            per_scale = []
            h, w = view.image.shape[:2]
            for s in self.scales:
                img = view.image if (h, w) == (s, s) else resize_bilinear(
                    view.image, s, s)
                grid = self.vit.forward(img, adapters=self.adapters,
                                        train=train, rng=rng)
                per_scale.append((grid, (h, w)))
            grids[view.id] = per_scale
        return grids

    def conditioning(self, points: np.ndarray,
                     grids: dict[str, list[tuple[Tensor, tuple[int, int]]]],
                     train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        n_scales = len(next(iter(grids.values())))
        bounds = []
        uvs = []
        for view in self.train_views:
            u, v, _, inb = project(view.camera, points)
            uvs.append((u, v))
            bounds.append(inb)
        in_bounds = np.stack(bounds)
        per_scale = []
        for s in range(n_scales):
            feats = []
            for i, view in enumerate(self.train_views):
                grid, src = grids[view.id][s]
                feats.append(bilinear_sample(grid, uvs[i][0], uvs[i][1], src))
            agg, n_empty = aggregate_views(feats, in_bounds, self.fusion,
                                           train=train, rng=rng)
            per_scale.append(agg)
        self.oob_points += int((in_bounds.sum(axis=0) == 0).sum())
        if n_scales == 1:
            fused = per_scale[0]
        else:
            fused = fuse_scales(per_scale, self.fusion.params["scale_logits"])
        return project_features(fused, self.fusion)

    # rendering ---------------------------------------------------------
    def render_rays(self, origins: np.ndarray, dirs: np.ndarray,
                    near: float, far: float, n_samples: int,
                    background: np.ndarray | None,
                    jitter: bool = False,
                    train: bool = False,
                    rng: np.random.Generator | None = None,
                    grids=None) -> tuple[Tensor, Tensor, Tensor]:
        n_rays = origins.shape[0]
        t, deltas = stratified_samples(near, far, n_rays, n_samples, jitter, rng)
        pts = sample_points(origins, dirs, t).reshape(-1, 3)
        enc = self.mlp.config.encoding
        enc_x = positional_encoding(pts / self.pos_scale, enc.l_pos,
                                    enc.include_input)
        dirs_rep = np.repeat(dirs, n_samples, axis=0)
        enc_d = positional_encoding(dirs_rep, enc.l_dir, enc.include_input)
        cond = None
        if self.variant != "baseline":
            if grids is None:
                grids = self.feature_grids(train=train, rng=rng)
            cond = self.conditioning(pts, grids, train=train, rng=rng)
        rgb, sigma = self.mlp.forward(enc_x, enc_d, cond, train=train, rng=rng)
        colors = ad.reshape(rgb, (n_rays, n_samples, 3))
        sigmas = ad.reshape(sigma, (n_rays, n_samples))
        return composite(colors, sigmas, deltas, background)

    def render_view(self, camera, near: float, far: float, n_samples: int,
                    background: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Full-image forward rendering (no gradient tracking)."""
        from .render import generate_rays

        rows, cols = np.mgrid[0:camera.height, 0:camera.width]
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
        with ad.no_grad():
            grids = self.feature_grids(train=False)
            out = np.empty((pixels.shape[0], 3), dtype=np.float32)
            for lo in range(0, pixels.shape[0], chunk):
                sel = pixels[lo:lo + chunk]
                origins, dirs = generate_rays(camera, sel)
                pix, _, _ = self.render_rays(origins, dirs, near, far, n_samples,
                                             background, jitter=False,
                                             grids=grids)
                out[lo:lo + sel.shape[0]] = pix.data
        return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)
