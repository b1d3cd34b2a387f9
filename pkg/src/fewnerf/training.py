"""Training protocol: Adam with cosine annealing (or plateau halving), global
gradient clipping, a progressive coarse-to-fine target schedule, early stopping
on validation PSNR, and the four-variant comparison runner.

One epoch is total-train-pixels-at-the-current-pyramid-level / rays_per_batch
steps (rounded up). Checkpoints are NCP1 files (shared blob container).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binio import read_blob_file, write_blob_file
from .dataio import Scene
from .features import write_nfm1, FeatureMap
from .imageops import downsample_average
from .metrics import MetricReport, psnr, ssim
from .model import MlpConfig
from .render import generate_rays
from .variants import VARIANTS, VariantError, VariantModel
from .vit import MiniViTConfig

NCP_MAGIC = b"NCP1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    grad_clip_norm: float = 1.0
    dropout: float = 0.1
    patience: int = 20
    rays_per_batch: int = 256
    samples_per_ray: int = 32
    lr_schedule: str = "cosine"  # or "plateau_half"
    progressive: str = "pyramid"  # or "batch" or "none"
    seed: int = 0
    variant: str = "baseline"
    aggregation: str = "weighted_average"
    lora_rank: int = 16
    conditioning_dim: int = 256
    jitter: bool = True

    def __post_init__(self):
        for name in ("epochs", "lr", "grad_clip_norm", "patience",
                     "rays_per_batch", "samples_per_ray"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.lr_schedule not in ("cosine", "plateau_half"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.progressive not in ("pyramid", "batch", "none"):
            raise ValueError(f"unknown progressive mode {self.progressive!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def hash(self) -> str:
        return sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------
# optimizer

class AdamState:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}
        self.step_count = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - np.float32(lr) * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


class PlateauSchedule:
    """Halve the lr when the monitored value stops improving."""

    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 10):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def update(self, value: float) -> float:
        if value > self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class EarlyStopper:
    """Stop once `patience` epochs have passed without a new best value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


# ----------------------------------------------------------------------
# records

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_psnr: float
    val_psnr: float
    lr: float


@dataclass
class ExperimentRecord:
    variant: str
    seed: int
    config_hash: str
    train_view_ids: list[str]
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_psnr: float = -math.inf
    test_metrics: MetricReport | None = None
    wall_time: float = 0.0

    def metrics_csv(self) -> str:
        lines = ["epoch,train_loss,train_psnr,val_psnr,lr"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss:.8f},{e.train_psnr:.6f},"
                         f"{e.val_psnr:.6f},{e.lr:.8f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "train_view_ids": self.train_view_ids,
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_psnr": self.best_val_psnr,
            "test": self.test_metrics.to_dict() if self.test_metrics else None,
            "wall_time_s": self.wall_time,
        }


# ----------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: VariantModel, config: TrainConfig) -> None:
    meta = {
        "variant": model.variant,
        "train_config": asdict(config),
        "mlp": {
            "depth": model.mlp.config.depth,
            "width": model.mlp.config.width,
            "skip_layer": model.mlp.config.skip_layer,
            "conditioning_dim": model.mlp.config.conditioning_dim,
            "color_hidden": model.mlp.config.color_hidden,
            "dropout": model.mlp.config.dropout,
            "l_pos": model.mlp.config.encoding.l_pos,
            "l_dir": model.mlp.config.encoding.l_dir,
            "include_input": model.mlp.config.encoding.include_input,
        },
        "vit": asdict(model.vit.config) if model.vit is not None else None,
        "scales": model.scales,
        "pos_scale": model.pos_scale,
        "aggregation": model.fusion.aggregation if model.fusion else None,
        "feature_dim": model.fusion.dim if model.fusion else None,
        "train_view_ids": [v.id for v in model.train_views],
    }
    write_blob_file(path, NCP_MAGIC, meta, model.state_arrays())


def load_checkpoint(path, scene: Scene,
                    features_dir: str | None = None) -> tuple[VariantModel, dict]:
    _, meta, arrays = read_blob_file(path, NCP_MAGIC)
    from .model import EncodingConfig

    m = meta["mlp"]
    mlp_config = MlpConfig(
        depth=m["depth"], width=m["width"], skip_layer=m["skip_layer"],
        conditioning_dim=m["conditioning_dim"], color_hidden=m["color_hidden"],
        dropout=m["dropout"],
        encoding=EncodingConfig(l_pos=m["l_pos"], l_dir=m["l_dir"],
                                include_input=m["include_input"]))
    tc = meta["train_config"]
    # the saved MLP width wins over the train config's default
    cond_dim = m["conditioning_dim"] or tc["conditioning_dim"]
    model = VariantModel.create(
        meta["variant"], scene, seed=tc["seed"],
        conditioning_dim=cond_dim,
        aggregation=tc["aggregation"], lora_rank=tc["lora_rank"],
        dropout=tc["dropout"], mlp_config=mlp_config,
        vit_config=MiniViTConfig(**meta["vit"]) if meta["vit"] else None,
        features_dir=features_dir,
        scales=meta["scales"] or None)
    ckpt_ids = meta["train_view_ids"]
    model_ids = [v.id for v in model.train_views]
    if ckpt_ids != model_ids:
        raise VariantError(
            f"checkpoint train views {ckpt_ids} do not match scene {model_ids}")
    model.load_state_arrays(arrays)
    return model, meta


# ----------------------------------------------------------------------
# training loop

def _pyramid_factor(epoch: int, total: int) -> int:
    frac = epoch / total
    if frac < 0.25:
        return 4
    if frac < 0.5:
        return 2
    return 1


def _level_views(scene: Scene, factor: int):
    """Training targets and cameras at one pyramid level."""
    views = sorted(scene.split("train"), key=lambda v: v.id)
    if factor == 1:
        return [(v.image, v.camera) for v in views]
    out = []
    for v in views:
        img = downsample_average(v.image, factor)
        out.append((img, v.camera.scaled(1.0 / factor)))
    return out


def train(scene: Scene, config: TrainConfig, out_dir=None,
          model: VariantModel | None = None,
          features_dir: str | None = None,
          vit_weights: str | None = None,
          vit_config: MiniViTConfig | None = None,
          max_steps: int | None = None,
          stop_at_train_psnr: float | None = None,
          log=print) -> tuple[ExperimentRecord, VariantModel]:
    t0 = time.monotonic()
    if not scene.split("val"):
        raise VariantError("training requires validation views (early stopping)")
    if model is None:
        model = VariantModel.create(
            config.variant, scene, seed=config.seed,
            conditioning_dim=config.conditioning_dim,
            aggregation=config.aggregation, lora_rank=config.lora_rank,
            dropout=config.dropout, features_dir=features_dir,
            vit_weights=vit_weights, vit_config=vit_config)
    params = model.trainable_params()
    adam = AdamState(params)
    stopper = EarlyStopper(config.patience)
    plateau = PlateauSchedule(config.lr) if config.lr_schedule == "plateau_half" else None
    rng = ad.make_rng(config.seed)
    record = ExperimentRecord(variant=config.variant, seed=config.seed,
                              config_hash=config.hash(),
                              train_view_ids=[v.id for v in model.train_views])
    best_state: dict[str, np.ndarray] | None = None
    val_views = scene.split("val")
    total_steps = 0

    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            lr_t = cosine_lr(epoch, config.epochs, config.lr)
        else:
            lr_t = plateau.lr
        factor = _pyramid_factor(epoch, config.epochs) if config.progressive == "pyramid" else 1
        level = _level_views(scene, factor)
        sizes = [img.shape[0] * img.shape[1] for img, _ in level]
        offsets = np.cumsum([0] + sizes)
        total_px = offsets[-1]
        rays = config.rays_per_batch
        if config.progressive == "batch":
            rays = max(16, rays // _pyramid_factor(epoch, config.epochs))
        steps = max(1, math.ceil(total_px / rays))

        losses = []
        for step in range(steps):
            flat = rng.integers(0, total_px, size=rays)
            origins = np.empty((rays, 3), np.float32)
            dirs = np.empty((rays, 3), np.float32)
            targets = np.empty((rays, 3), np.float32)
            for vi, (img, cam) in enumerate(level):
                sel = (flat >= offsets[vi]) & (flat < offsets[vi + 1])
                if not sel.any():
                    continue
                local = flat[sel] - offsets[vi]
                rows = local // img.shape[1]
                cols = local % img.shape[1]
                o, d = generate_rays(cam, np.stack([rows, cols], axis=1))
                origins[sel] = o
                dirs[sel] = d
                targets[sel] = img[rows, cols]
            grids = model.feature_grids(train=True, rng=rng)
            pixel, _, _ = model.render_rays(
                origins, dirs, scene.near, scene.far, config.samples_per_ray,
                scene.background, jitter=config.jitter, train=True, rng=rng,
                grids=grids)
            loss = ad.mse_loss(pixel, Tensor(targets))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}, lr {lr_t:g}")
            losses.append(loss_val)
            grads = ad.grads_of(loss, params)
            grads, _ = clip_grad_norm(grads, config.grad_clip_norm)
            adam_step(params, grads, adam, lr_t)
            total_steps += 1
            if max_steps is not None and total_steps >= max_steps:
                break

        mean_loss = float(np.mean(losses))
        train_psnr = 10.0 * math.log10(1.0 / mean_loss) if mean_loss > 0 else math.inf
        val_psnrs = []
        for v in val_views:
            img = model.render_view(v.camera, scene.near, scene.far,
                                    config.samples_per_ray, scene.background)
            val_psnrs.append(psnr(img, v.image))
        val_psnr = float(np.mean(val_psnrs))
        record.epochs.append(EpochStats(epoch=epoch, train_loss=mean_loss,
                                        train_psnr=train_psnr,
                                        val_psnr=val_psnr, lr=lr_t))
        if log:
            log(f"[{config.variant}] epoch {epoch:3d} loss {mean_loss:.5f} "
                f"train {train_psnr:6.2f} dB val {val_psnr:6.2f} dB lr {lr_t:.2e}")
        if stopper.update(epoch, val_psnr):
            record.best_epoch = epoch
            record.best_val_psnr = val_psnr
            best_state = model.state_arrays()
        if plateau is not None:
            plateau.update(val_psnr)
        if max_steps is not None and total_steps >= max_steps:
            break
        if stop_at_train_psnr is not None and train_psnr >= stop_at_train_psnr:
            break
        if stopper.should_stop(epoch):
            break

    if best_state is not None:
        model.load_state_arrays(best_state)

    test_views = scene.split("test")
    if test_views:
        report = MetricReport()
        for v in test_views:
            img = model.render_view(v.camera, scene.near, scene.far,
                                    config.samples_per_ray, scene.background)
            report.psnr_per_view.append(psnr(img, v.image))
            report.ssim_per_view.append(ssim(img, v.image))
        record.test_metrics = report
    record.wall_time = time.monotonic() - t0

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(record.metrics_csv())
        (out / "summary.json").write_text(json.dumps(record.summary(), indent=2))
        save_checkpoint(out / "checkpoint.ncp", model, config)
    return record, model


# ----------------------------------------------------------------------
# comparison harness

def export_minivit_features(scene: Scene, out_dir, vit, scale_id: int = 0) -> None:
    """Write NFM1 feature maps of the train views from a MiniViT backbone."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        for v in sorted(scene.split("train"), key=lambda x: x.id):
            grid = vit.forward(v.image).data
            fm = FeatureMap(view_id=v.id, scale_id=scale_id, data=grid,
                            source_size=v.image.shape[:2])
            write_nfm1(out / f"{v.id}_s{scale_id}.nfm", fm)


def format_table(rows: list[tuple[str, float, float, str]]) -> tuple[str, str]:
    """(csv, aligned text) with Method / PSNR / SSIM / LPIPS columns."""
    csv_lines = ["Method,PSNR,SSIM,LPIPS"]
    for method, p, s, l in rows:
        csv_lines.append(f"{method},{p:.4f},{s:.4f},{l}")
    widths = [max(len(r[0]) for r in rows + [("Method", 0, 0, "")]), 8, 6, 6]
    txt = [f"{'Method':<{widths[0]}}  {'PSNR':>8}  {'SSIM':>6}  {'LPIPS':>6}"]
    for method, p, s, l in rows:
        txt.append(f"{method:<{widths[0]}}  {p:>8.4f}  {s:>6.4f}  {l or '-':>6}")
    return "\n".join(csv_lines) + "\n", "\n".join(txt) + "\n"


def run_comparison(scene: Scene, base_config: TrainConfig, out_dir,
                   features_dir: str | None = None,
                   vit_weights: str | None = None,
                   vit_config: MiniViTConfig | None = None,
                   log=print) -> list[ExperimentRecord]:
    """Train all four variants with identical seeds and shared backbone config."""
    from .vit import MiniViT

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if vit_weights is not None:
        vit = MiniViT.load(vit_weights)
    else:
        vit = MiniViT.create(vit_config or MiniViTConfig(), seed=base_config.seed)
        vit_weights = str(out / "minivit.mvw")
        vit.save(vit_weights)
    if features_dir is None:
        features_dir = str(out / "features")
        export_minivit_features(scene, features_dir, vit)

    records = []
    rows = []
    for variant in VARIANTS:
        cfg = TrainConfig(**{**asdict(base_config), "variant": variant})
        run_dir = out / variant
        record, _ = train(scene, cfg, out_dir=run_dir,
                          features_dir=features_dir if variant == "frozen" else None,
                          vit_weights=vit_weights if variant in ("lora", "multiscale") else None,
                          log=log)
        records.append(record)
        (out / f"curves_{variant}.csv").write_text(record.metrics_csv())
        t = record.test_metrics
        rows.append((variant, t.psnr if t else math.nan,
                     t.ssim if t else math.nan, ""))
    csv_text, txt_text = format_table(rows)
    (out / "table.csv").write_text(csv_text)
    (out / "table.txt").write_text(txt_text)
    return records
