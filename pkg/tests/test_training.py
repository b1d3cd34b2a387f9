import math

import numpy as np
import pytest

from fewnerf.autodiff import Tensor
from fewnerf.dataio import ProceduralSpec, procedural_scene
from fewnerf.model import EncodingConfig, MlpConfig
from fewnerf.training import (AdamState, EarlyStopper, PlateauSchedule,
                              TrainConfig, TrainingDiverged, adam_step,
                              clip_grad_norm, cosine_lr, load_checkpoint,
                              save_checkpoint, train)
from fewnerf.variants import VariantError, VariantModel
from fewnerf.vit import MiniViTConfig

TINY_MLP = dict(depth=2, width=16, skip_layer=1, color_hidden=8, dropout=0.0,
                encoding=EncodingConfig(l_pos=4, l_dir=2))
TINY_VIT = MiniViTConfig(patch_size=8, embed_dim=16, heads=4, depth=1,
                         base_resolution=16)


@pytest.fixture(scope="module")
def scene():
    return procedural_scene(ProceduralSpec(resolution=16, n_train=2, n_val=1,
                                           n_test=1, seed=0))


def tiny_config(**kw):
    base = dict(epochs=2, patience=2, rays_per_batch=64, samples_per_ray=4,
                dropout=0.0, progressive="none", jitter=False)
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(variant, scene, **kw):
    return VariantModel.create(variant, scene, seed=0, conditioning_dim=32,
                               mlp_config=MlpConfig(**TINY_MLP),
                               vit_config=TINY_VIT, **kw)


class TestConfig:
    def test_defaults_valid(self):
        TrainConfig()

    @pytest.mark.parametrize("field,value", [
        ("epochs", 0), ("lr", -1.0), ("patience", 0), ("rays_per_batch", 0),
        ("samples_per_ray", -2), ("grad_clip_norm", 0.0),
    ])
    def test_positive_fields_enforced(self, field, value):
        with pytest.raises(ValueError, match=field):
            TrainConfig(**{field: value})

    def test_patience_bounded_by_epochs(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(epochs=5, patience=10)

    def test_enumerations_checked(self):
        with pytest.raises(ValueError, match="schedule"):
            TrainConfig(lr_schedule="exponential")
        with pytest.raises(ValueError, match="progressive"):
            TrainConfig(progressive="octree")
        with pytest.raises(ValueError, match="variant"):
            TrainConfig(variant="distilled")

    def test_hash_stable_and_sensitive(self):
        assert TrainConfig().hash() == TrainConfig().hash()
        assert TrainConfig().hash() != TrainConfig(lr=1e-3).hash()


class TestAdam:
    def test_first_step_size_is_lr(self):
        # bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        p = {"w": Tensor(np.array([1.0, 1.0], np.float32), requires_grad=True)}
        g = {"w": np.array([0.5, -0.2], np.float32)}
        adam_step(p, g, AdamState(p), lr=0.1)
        np.testing.assert_allclose(p["w"].data, [0.9, 1.1], atol=1e-6)

    def test_moments_accumulate(self):
        p = {"w": Tensor(np.array([0.0], np.float32), requires_grad=True)}
        state = AdamState(p)
        adam_step(p, {"w": np.array([1.0], np.float32)}, state, lr=0.0)
        np.testing.assert_allclose(state.m["w"], [0.1], atol=1e-7)
        np.testing.assert_allclose(state.v["w"], [0.001], atol=1e-7)
        assert state.step_count == 1

    def test_nonfinite_gradient_diverges(self):
        p = {"w": Tensor(np.array([0.0], np.float32), requires_grad=True)}
        with pytest.raises(TrainingDiverged, match="w"):
            adam_step(p, {"w": np.array([np.nan], np.float32)}, AdamState(p),
                      lr=0.1)


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 2e-4) == pytest.approx(2e-4, abs=1e-12)
        assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4, abs=1e-12)
        # approaches zero at the end of training
        assert cosine_lr(99, 100, 2e-4) < 1e-7

    def test_cosine_closed_form(self):
        for e in (0, 7, 31, 99):
            want = 1e-3 * 0.5 * (1.0 + math.cos(math.pi * e / 100))
            assert cosine_lr(e, 100, 1e-3) == pytest.approx(want, rel=1e-12)

    def test_cosine_bounds_checked(self):
        with pytest.raises(ValueError):
            cosine_lr(100, 100, 1e-3)
        with pytest.raises(ValueError):
            cosine_lr(-1, 100, 1e-3)

    def test_plateau_halves_after_patience(self):
        s = PlateauSchedule(1e-3, factor=0.5, patience=2)
        assert s.update(10.0) == 1e-3   # new best
        assert s.update(9.0) == 1e-3    # stale 1
        assert s.update(9.5) == 5e-4    # stale 2 -> halve
        assert s.update(11.0) == 5e-4   # new best keeps current lr

    def test_plateau_counter_resets_on_improvement(self):
        s = PlateauSchedule(1e-3, patience=2)
        s.update(1.0)
        s.update(0.5)
        s.update(2.0)  # improvement resets staleness
        assert s.update(1.0) == 1e-3


class TestClipping:
    def test_three_four_five_triangle(self):
        grads = {"a": np.array([3.0], np.float32),
                 "b": np.array([4.0], np.float32)}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0, abs=1e-6)
        np.testing.assert_allclose(clipped["a"], [0.6], atol=1e-6)
        np.testing.assert_allclose(clipped["b"], [0.8], atol=1e-6)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3], np.float32)}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert clipped["a"] is grads["a"]
        assert norm == pytest.approx(0.3, abs=1e-6)

    def test_post_clip_norm_bounded(self):
        rng = np.random.default_rng(0)
        grads = {f"p{i}": rng.normal(0, 3, size=(10,)).astype(np.float32)
                 for i in range(5)}
        clipped, _ = clip_grad_norm(grads, 1.0)
        total = sum(float(np.sum(g.astype(np.float64) ** 2))
                    for g in clipped.values())
        assert math.sqrt(total) <= 1.0 + 1e-6


class TestEarlyStopper:
    def test_crafted_sequence_stops_after_patience(self):
        # best at epoch 0, then 20 non-improving epochs -> stop at epoch 20
        s = EarlyStopper(patience=20)
        assert s.update(0, 30.0)
        for e in range(1, 21):
            assert not s.update(e, 29.0)
            if e < 20:
                assert not s.should_stop(e)
        assert s.should_stop(20)
        assert s.best_epoch == 0
        assert s.best == 30.0

    def test_improvement_resets_window(self):
        s = EarlyStopper(patience=3)
        s.update(0, 1.0)
        s.update(1, 0.5)
        s.update(2, 2.0)
        assert not s.should_stop(4)
        assert s.should_stop(5)

    def test_equal_value_is_not_improvement(self):
        s = EarlyStopper(patience=2)
        assert s.update(0, 1.0)
        assert not s.update(1, 1.0)
        assert s.should_stop(2)


class TestTrainLoop:
    def test_smoke_run_writes_artifacts(self, scene, tmp_path):
        record, model = train(scene, tiny_config(),
                              out_dir=tmp_path / "run",
                              model=tiny_model("baseline", scene),
                              max_steps=4, log=None)
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "summary.json").exists()
        assert (tmp_path / "run" / "checkpoint.ncp").exists()
        assert record.epochs
        assert record.metrics_csv().startswith(
            "epoch,train_loss,train_psnr,val_psnr,lr")
        assert all(math.isfinite(e.train_loss) for e in record.epochs)

    def test_training_reduces_loss(self, scene):
        config = tiny_config(epochs=3, patience=3, lr=5e-3)
        record, _ = train(scene, config, model=tiny_model("baseline", scene),
                          log=None)
        assert record.epochs[-1].train_loss < record.epochs[0].train_loss

    def test_determinism_same_seed(self, scene):
        def run():
            record, _ = train(scene, tiny_config(),
                              model=tiny_model("baseline", scene),
                              max_steps=3, log=None)
            return record.metrics_csv()

        assert run() == run()

    def test_requires_val_views(self):
        bare = procedural_scene(ProceduralSpec(resolution=16, n_train=2,
                                               n_val=0, n_test=0, seed=0))
        with pytest.raises(VariantError, match="validation"):
            train(bare, tiny_config(), model=tiny_model("baseline", bare),
                  log=None)

    def test_best_state_restored(self, scene):
        record, model = train(scene, tiny_config(epochs=2, patience=2),
                              model=tiny_model("baseline", scene), log=None)
        assert record.best_epoch >= 0
        assert record.best_val_psnr == max(e.val_psnr for e in record.epochs)

    def test_lora_variant_trains(self, scene):
        record, _ = train(scene, tiny_config(variant="lora"),
                          model=tiny_model("lora", scene), max_steps=2,
                          log=None)
        assert all(math.isfinite(e.train_loss) for e in record.epochs)


class TestCheckpoints:
    def test_round_trip_baseline(self, scene, tmp_path):
        config = tiny_config()
        model = tiny_model("baseline", scene)
        p = tmp_path / "m.ncp"
        save_checkpoint(p, model, config)
        back, meta = load_checkpoint(p, scene)
        assert meta["variant"] == "baseline"
        assert meta["train_config"]["samples_per_ray"] == 4
        for k, t in model.trainable_params().items():
            np.testing.assert_array_equal(t.data,
                                          back.trainable_params()[k].data)

    def test_round_trip_lora_restores_vit_base(self, scene, tmp_path):
        config = tiny_config(variant="lora")
        model = tiny_model("lora", scene)
        p = tmp_path / "m.ncp"
        save_checkpoint(p, model, config)
        back, _ = load_checkpoint(p, scene)
        assert back.vit.weights_hash() == model.vit.weights_hash()
        img = scene.split("val")[0]
        a = model.render_view(img.camera, scene.near, scene.far, 4,
                              scene.background)
        b = back.render_view(img.camera, scene.near, scene.far, 4,
                             scene.background)
        np.testing.assert_array_equal(a, b)

    def test_checkpoint_binds_train_views(self, scene, tmp_path):
        config = tiny_config()
        model = tiny_model("baseline", scene)
        p = tmp_path / "m.ncp"
        save_checkpoint(p, model, config)
        other = procedural_scene(ProceduralSpec(resolution=16, n_train=3,
                                                n_val=1, n_test=1, seed=0))
        with pytest.raises(VariantError, match="train views"):
            load_checkpoint(p, other)

    def test_checkpoint_bytes_deterministic(self, scene, tmp_path):
        config = tiny_config()
        model = tiny_model("baseline", scene)
        save_checkpoint(tmp_path / "a.ncp", model, config)
        save_checkpoint(tmp_path / "b.ncp", model, config)
        assert (tmp_path / "a.ncp").read_bytes() == (tmp_path / "b.ncp").read_bytes()
