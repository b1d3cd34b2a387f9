import json

import numpy as np
import pytest
from click.testing import CliRunner

from fewnerf.cli import main

FAST = ["--epochs", "1", "--patience", "1", "--rays-per-batch", "256",
        "--samples-per-ray", "4", "--progressive", "none"]


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    result = CliRunner().invoke(main, [
        "make-scene", "--resolution", "16", "--n-train", "2", "--n-val", "1",
        "--n-test", "1", "--out", str(out), "--force"])
    assert result.exit_code == 0, result.output
    return str(out)


@pytest.fixture(scope="module")
def trained_dir(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(main, [
        "train", "--scene", scene_dir, "--variant", "baseline",
        "--out", str(out), *FAST])
    assert result.exit_code == 0, result.output
    return out


class TestMakeScene:
    def test_writes_layout_and_manifest(self, runner, tmp_path):
        out = tmp_path / "scene"
        result = runner.invoke(main, ["make-scene", "--resolution", "16",
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "transforms_train.json").exists()
        assert (out / "transforms_val.json").exists()
        assert (out / "transforms_test.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "make-scene"
        assert manifest["config"]["resolution"] == 16

    def test_default_counts(self, runner, tmp_path):
        out = tmp_path / "scene"
        result = runner.invoke(main, ["make-scene", "--resolution", "16",
                                      "--out", str(out)])
        assert result.exit_code == 0
        meta = json.loads((out / "transforms_train.json").read_text())
        assert len(meta["frames"]) == 5

    def test_refuses_nonempty_without_force(self, runner, tmp_path):
        out = tmp_path / "scene"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        result = runner.invoke(main, ["make-scene", "--resolution", "16",
                                      "--out", str(out)])
        assert result.exit_code != 0
        assert "not empty" in result.output
        result = runner.invoke(main, ["make-scene", "--resolution", "16",
                                      "--out", str(out), "--force"])
        assert result.exit_code == 0

    def test_resolution_floor_reported(self, runner, tmp_path):
        result = runner.invoke(main, ["make-scene", "--resolution", "15",
                                      "--out", str(tmp_path / "s")])
        assert result.exit_code != 0
        assert ">= 16" in result.output


class TestTrain:
    def test_writes_run_artifacts(self, trained_dir):
        assert (trained_dir / "metrics.csv").exists()
        assert (trained_dir / "summary.json").exists()
        assert (trained_dir / "checkpoint.ncp").exists()
        assert (trained_dir / "manifest.json").exists()
        summary = json.loads((trained_dir / "summary.json").read_text())
        assert summary["variant"] == "baseline"
        assert summary["epochs_run"] == 1

    def test_rerun_is_bitwise_identical(self, runner, scene_dir, trained_dir,
                                        tmp_path):
        out = tmp_path / "again"
        result = runner.invoke(main, [
            "train", "--scene", scene_dir, "--variant", "baseline",
            "--out", str(out), *FAST])
        assert result.exit_code == 0, result.output
        assert ((out / "metrics.csv").read_text()
                == (trained_dir / "metrics.csv").read_text())
        assert ((out / "checkpoint.ncp").read_bytes()
                == (trained_dir / "checkpoint.ncp").read_bytes())

    def test_frozen_without_features_is_usage_error(self, runner, scene_dir,
                                                    tmp_path):
        result = runner.invoke(main, [
            "train", "--scene", scene_dir, "--variant", "frozen",
            "--out", str(tmp_path / "run"), *FAST])
        assert result.exit_code != 0
        assert "--features" in result.output

    def test_config_file_with_flag_override(self, runner, scene_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "patience": 1,
                                   "rays_per_batch": 256,
                                   "samples_per_ray": 4,
                                   "progressive": "none", "lr": 0.5}))
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "train", "--scene", scene_dir, "--variant", "baseline",
            "--out", str(out), "--config", str(cfg), "--lr", "1e-4"])
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["lr"] == 1e-4          # flag beats file
        assert manifest["config"]["samples_per_ray"] == 4  # file beats default


class TestEvalRender:
    def test_eval_reports_metrics_json(self, runner, scene_dir, trained_dir,
                                       tmp_path):
        out = tmp_path / "eval.json"
        result = runner.invoke(main, [
            "eval", "--checkpoint", str(trained_dir / "checkpoint.ncp"),
            "--scene", scene_dir, "--split", "test", "--out", str(out)])
        assert result.exit_code == 0, result.output
        report = json.loads(out.read_text())
        assert report["split"] == "test"
        assert len(report["psnr_per_view"]) == 1
        assert np.isfinite(report["psnr"])
        assert -1.0 <= report["ssim"] <= 1.0

    def test_render_writes_pngs(self, runner, scene_dir, trained_dir,
                                tmp_path):
        out = tmp_path / "renders"
        result = runner.invoke(main, [
            "render", "--checkpoint", str(trained_dir / "checkpoint.ncp"),
            "--scene", scene_dir, "--split", "val", "--count", "1",
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        pngs = list(out.glob("*.png"))
        assert len(pngs) == 1
        from PIL import Image
        assert Image.open(pngs[0]).size == (16, 16)

    def test_corrupt_checkpoint_reported(self, runner, scene_dir, trained_dir,
                                         tmp_path):
        bad = tmp_path / "bad.ncp"
        buf = bytearray((trained_dir / "checkpoint.ncp").read_bytes())
        buf[:4] = b"XXXX"
        bad.write_bytes(bytes(buf))
        result = runner.invoke(main, [
            "eval", "--checkpoint", str(bad), "--scene", scene_dir])
        assert result.exit_code != 0
        assert "magic" in result.output


class TestCompare:
    def test_compare_smoke(self, runner, scene_dir, tmp_path):
        out = tmp_path / "cmp"
        result = runner.invoke(main, [
            "compare", "--scene", scene_dir, "--out", str(out), *FAST])
        assert result.exit_code == 0, result.output
        table = (out / "table.csv").read_text().splitlines()
        assert table[0] == "Method,PSNR,SSIM,LPIPS"
        methods = [line.split(",")[0] for line in table[1:]]
        assert methods == ["baseline", "frozen", "lora", "multiscale"]
        for variant in methods:
            assert (out / variant / "checkpoint.ncp").exists()
            assert (out / f"curves_{variant}.csv").exists()
        assert (out / "table.txt").exists()
        assert (out / "minivit.mvw").exists()
        assert list((out / "features").glob("*.nfm"))
