import json

import numpy as np
import pytest
from PIL import Image

from feature_export.lpips import LpipsError, eval_lpips, write_report


def write_images(path, arrays):
    path.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        Image.fromarray(arr).save(path / f"{name}.png")


@pytest.fixture(scope="module")
def frames():
    rng = np.random.default_rng(0)
    return {f"r_{i}": rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
            for i in range(3)}


def test_identical_dirs_zero(tmp_path, frames):
    write_images(tmp_path / "pred", frames)
    write_images(tmp_path / "target", frames)
    report = eval_lpips(tmp_path / "pred", tmp_path / "target")
    assert set(report["per_view"]) == {"r_0.png", "r_1.png", "r_2.png"}
    assert all(v == 0.0 for v in report["per_view"].values())
    assert report["mean"] == 0.0


def test_different_images_positive(tmp_path, frames):
    write_images(tmp_path / "pred", frames)
    flipped = {k: v[::-1].copy() for k, v in frames.items()}
    write_images(tmp_path / "target", flipped)
    report = eval_lpips(tmp_path / "pred", tmp_path / "target")
    assert all(v > 0.0 for v in report["per_view"].values())


def test_mean_is_arithmetic(tmp_path, frames):
    write_images(tmp_path / "pred", frames)
    noisy = {k: np.clip(v.astype(int) + 8, 0, 255).astype(np.uint8)
             for k, v in frames.items()}
    write_images(tmp_path / "target", noisy)
    report = eval_lpips(tmp_path / "pred", tmp_path / "target")
    vals = list(report["per_view"].values())
    assert report["mean"] == pytest.approx(sum(vals) / len(vals), rel=1e-12)


def test_filename_mismatch_lists_differences(tmp_path, frames):
    write_images(tmp_path / "pred", frames)
    partial = {k: v for k, v in frames.items() if k != "r_2"}
    partial["extra"] = frames["r_0"]
    write_images(tmp_path / "target", partial)
    with pytest.raises(LpipsError, match="r_2.png") as e:
        eval_lpips(tmp_path / "pred", tmp_path / "target")
    assert "extra.png" in str(e.value)


def test_report_json(tmp_path, frames):
    write_images(tmp_path / "pred", frames)
    write_images(tmp_path / "target", frames)
    report = eval_lpips(tmp_path / "pred", tmp_path / "target")
    write_report(report, tmp_path / "lpips.json")
    back = json.loads((tmp_path / "lpips.json").read_text())
    assert back["mean"] == 0.0
    assert len(back["per_view"]) == 3
    assert "weights" in back
