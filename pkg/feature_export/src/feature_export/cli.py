"""feature-export CLI: `export` writes NFM1 feature maps, `lpips` scores
rendered outputs against references.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .export import (DEFAULT_MODEL, ExportError, ExportJob, export_features,
                     find_images)
from .lpips import LpipsError, eval_lpips, write_report


@click.group()
def main():
    """Dense DINOv2 feature export and LPIPS evaluation."""


@main.command()
@click.option("--images", required=True, type=click.Path(exists=True),
              help="image file or directory of images")
@click.option("--scales", default="224,448,896", show_default=True,
              help="comma-separated input resolutions")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--model", default=DEFAULT_MODEL, show_default=True,
              help="hub id or local directory of a DINOv2 checkpoint")
@click.option("--layer", default=None, type=int,
              help="hidden layer to export (default: final)")
def export(images, scales, out, model, layer):
    """Export one NFM1 file per image per scale."""
    try:
        scale_list = [int(s) for s in scales.split(",") if s.strip()]
        job = ExportJob(images=find_images(images), out_dir=Path(out),
                        model=model, scales=scale_list, layer=layer)
        written = export_features(job, log=click.echo)
    except (ExportError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    click.echo(f"wrote {len(written)} feature maps to {out}")


@main.command()
@click.option("--pred", required=True, type=click.Path(exists=True),
              help="directory of rendered images")
@click.option("--target", required=True, type=click.Path(exists=True),
              help="directory of reference images")
@click.option("--out", required=True, type=click.Path(),
              help="output JSON report")
def lpips(pred, target, out):
    """Per-view and mean LPIPS for matching filenames."""
    try:
        report = eval_lpips(pred, target)
    except LpipsError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    write_report(report, out)
    click.echo(f"mean LPIPS {report['mean']:.4f} over "
               f"{len(report['per_view'])} views ({report['weights']})")


if __name__ == "__main__":
    main()
