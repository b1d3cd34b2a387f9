"""Command-line interface: make-scene, train, eval, render, compare.

Every run directory is self-describing: it receives a manifest.json with the
command, its arguments, the merged configuration, and timestamps. Flags
override values from an optional JSON/TOML config file, which overrides
defaults.
"""

from __future__ import annotations

import datetime
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .dataio import (DatasetError, ProceduralSpec, load_nerf_synthetic,
                     procedural_scene, select_few_shot, write_nerf_synthetic)
from .metrics import MetricReport, psnr, ssim
from .training import (TrainConfig, load_checkpoint, run_comparison, train)
from .vit import MiniViTConfig


def _log(*args):
    if os.environ.get("FEWNERF_LOG", "").lower() != "quiet":
        print(*args)


def _write_manifest(out_dir: Path, command: str, config: dict,
                    inputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": inputs,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        import tomllib
        return tomllib.loads(p.read_text())
    return json.loads(p.read_text())


def _merge_train_config(ctx: click.Context, config_file: str | None,
                        **flags) -> TrainConfig:
    merged = asdict(TrainConfig())
    merged.update(_load_config_file(config_file))
    for name, value in flags.items():
        src = ctx.get_parameter_source(name)
        if src is not None and src.name == "COMMANDLINE":
            merged[name] = value
    return TrainConfig(**merged)


_train_options = [
    click.option("--epochs", type=int, default=TrainConfig.epochs),
    click.option("--lr", type=float, default=TrainConfig.lr),
    click.option("--patience", type=int, default=TrainConfig.patience),
    click.option("--rays-per-batch", "rays_per_batch", type=int,
                 default=TrainConfig.rays_per_batch),
    click.option("--samples-per-ray", "samples_per_ray", type=int,
                 default=TrainConfig.samples_per_ray),
    click.option("--lr-schedule", "lr_schedule",
                 type=click.Choice(["cosine", "plateau_half"]),
                 default=TrainConfig.lr_schedule),
    click.option("--progressive", type=click.Choice(["pyramid", "batch", "none"]),
                 default=TrainConfig.progressive),
    click.option("--dropout", type=float, default=TrainConfig.dropout),
    click.option("--grad-clip-norm", "grad_clip_norm", type=float,
                 default=TrainConfig.grad_clip_norm),
    click.option("--aggregation",
                 type=click.Choice(["weighted_average", "gated", "attention"]),
                 default=TrainConfig.aggregation),
    click.option("--lora-rank", "lora_rank", type=int,
                 default=TrainConfig.lora_rank),
    click.option("--seed", type=int, default=TrainConfig.seed),
]


def _add_train_options(f):
    for opt in reversed(_train_options):
        f = opt(f)
    return f


@click.group()
def main():
    """Few-shot NeRF experiment toolkit."""


@main.command("make-scene")
@click.option("--resolution", type=int, default=64)
@click.option("--n-train", type=int, default=5)
@click.option("--n-val", type=int, default=2)
@click.option("--n-test", type=int, default=8)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def cmd_make_scene(resolution, n_train, n_val, n_test, seed, out, force):
    """Generate a procedural scene in NeRF-synthetic layout."""
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise click.ClickException(
            f"output directory {out} is not empty (use --force)")
    try:
        spec = ProceduralSpec(resolution=resolution, n_train=n_train,
                              n_val=n_val, n_test=n_test, seed=seed)
    except DatasetError as e:
        raise click.ClickException(str(e))
    scene = procedural_scene(spec)
    write_nerf_synthetic(scene, out_dir)
    _write_manifest(out_dir, "make-scene",
                    {"resolution": resolution, "n_train": n_train,
                     "n_val": n_val, "n_test": n_test, "seed": seed}, {})
    _log(f"wrote {len(scene.views)} views to {out}")


def _load_scene(scene_dir: str, few_shot: int | None, seed: int):
    scene = load_nerf_synthetic(scene_dir)
    if few_shot is not None:
        scene = select_few_shot(scene, few_shot, seed)
    return scene


@main.command("train")
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--variant", required=True,
              type=click.Choice(["baseline", "frozen", "lora", "multiscale"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--features", "features_dir", type=click.Path(exists=True))
@click.option("--vit-weights", type=click.Path(exists=True))
@click.option("--few-shot", type=int)
@click.option("--config", "config_file", type=click.Path(exists=True))
@_add_train_options
@click.pass_context
def cmd_train(ctx, scene_dir, variant, out, features_dir, vit_weights,
              few_shot, config_file, **flags):
    """Train one variant on a scene."""
    if variant == "frozen" and features_dir is None:
        raise click.UsageError("--variant frozen requires --features")
    config = _merge_train_config(ctx, config_file, **flags)
    config.variant = variant
    scene = _load_scene(scene_dir, few_shot, config.seed)
    out_dir = Path(out)
    _write_manifest(out_dir, "train", asdict(config),
                    {"scene": scene_dir, "features": features_dir,
                     "vit_weights": vit_weights})
    try:
        record, _ = train(scene, config, out_dir=out_dir,
                          features_dir=features_dir, vit_weights=vit_weights,
                          log=_log)
    except Exception as e:
        raise click.ClickException(str(e))
    _log(f"done: best val PSNR {record.best_val_psnr:.2f} dB "
         f"at epoch {record.best_epoch}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--features", "features_dir", type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "val", "test"]),
              default="test")
@click.option("--out", type=click.Path())
def cmd_eval(checkpoint, scene_dir, features_dir, split, out):
    """Render a split and report per-view and mean PSNR/SSIM as JSON."""
    scene = load_nerf_synthetic(scene_dir)
    try:
        model, meta = load_checkpoint(checkpoint, scene, features_dir=features_dir)
    except Exception as e:
        raise click.ClickException(str(e))
    samples = meta["train_config"]["samples_per_ray"]
    report = MetricReport()
    ids = []
    for v in scene.split(split):
        img = model.render_view(v.camera, scene.near, scene.far, samples,
                                scene.background)
        report.psnr_per_view.append(psnr(img, v.image))
        report.ssim_per_view.append(ssim(img, v.image))
        ids.append(v.id)
    result = {"split": split, "view_ids": ids, **report.to_dict()}
    text = json.dumps(result, indent=2)
    if out:
        Path(out).write_text(text)
    print(text)


@main.command("render")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--features", "features_dir", type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "val", "test"]),
              default="test")
@click.option("--count", type=int, help="render only the first N views")
@click.option("--out", required=True, type=click.Path())
def cmd_render(checkpoint, scene_dir, features_dir, split, count, out):
    """Render views of a split to 8-bit PNGs."""
    scene = load_nerf_synthetic(scene_dir)
    try:
        model, meta = load_checkpoint(checkpoint, scene, features_dir=features_dir)
    except Exception as e:
        raise click.ClickException(str(e))
    samples = meta["train_config"]["samples_per_ray"]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = scene.split(split)
    if count is not None:
        views = views[:count]
    for v in views:
        img = model.render_view(v.camera, scene.near, scene.far, samples,
                                scene.background)
        arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / f"{v.id}.png")
        _log(f"rendered {v.id}")
    _write_manifest(out_dir, "render", {"split": split, "count": count},
                    {"scene": scene_dir, "checkpoint": checkpoint})


@main.command("compare")
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--features", "features_dir", type=click.Path(exists=True))
@click.option("--vit-weights", type=click.Path(exists=True))
@click.option("--few-shot", type=int)
@click.option("--config", "config_file", type=click.Path(exists=True))
@_add_train_options
@click.pass_context
def cmd_compare(ctx, scene_dir, out, features_dir, vit_weights, few_shot,
                config_file, **flags):
    """Run all four variants with identical seeds and emit the comparison table."""
    config = _merge_train_config(ctx, config_file, **flags)
    scene = _load_scene(scene_dir, few_shot, config.seed)
    out_dir = Path(out)
    _write_manifest(out_dir, "compare", asdict(config),
                    {"scene": scene_dir, "features": features_dir,
                     "vit_weights": vit_weights})
    try:
        run_comparison(scene, config, out_dir, features_dir=features_dir,
                       vit_weights=vit_weights, log=_log)
    except Exception as e:
        raise click.ClickException(str(e))
    _log((out_dir / "table.txt").read_text())


if __name__ == "__main__":
    main()
