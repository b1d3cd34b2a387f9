import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewnerf import autodiff as ad
from fewnerf.autodiff import Tensor, grad_check, make_rng
from fewnerf.model import (EncodingConfig, MlpConfig, NerfMlp,
                           kaiming_uniform, positional_encoding)


class TestPositionalEncoding:
    def test_zero_vector(self):
        # sin(0)=0, cos(0)=1 at every band, input passed through
        out = positional_encoding(np.zeros(3), l=2)
        np.testing.assert_allclose(
            out, [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1], atol=1e-7)

    def test_half_coordinate_first_band(self):
        # sin(pi*0.5)=1, cos(pi*0.5)=0
        out = positional_encoding(np.array([0.5]), l=1)
        np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-7)

    def test_band_frequencies_double(self):
        v = np.array([0.3])
        out = positional_encoding(v, l=3, include_input=False)
        for k in range(3):
            assert out[2 * k] == pytest.approx(np.sin((2.0 ** k) * np.pi * 0.3),
                                               abs=1e-6)
            assert out[2 * k + 1] == pytest.approx(np.cos((2.0 ** k) * np.pi * 0.3),
                                                   abs=1e-6)

    def test_batched_shape(self):
        out = positional_encoding(np.zeros((7, 3)), l=10)
        assert out.shape == (7, 63)
        assert out.dtype == np.float32

    def test_exclude_input(self):
        out = positional_encoding(np.zeros((2, 3)), l=4, include_input=False)
        assert out.shape == (2, 24)

    def test_config_dims(self):
        enc = EncodingConfig()
        assert enc.pos_dim() == 63   # 3 * (2*10 + 1)
        assert enc.dir_dim() == 27   # 3 * (2*4 + 1)
        assert EncodingConfig(include_input=False).pos_dim() == 60

    def test_config_rejects_zero_bands(self):
        with pytest.raises(ValueError):
            EncodingConfig(l_pos=0)


class TestInit:
    def test_kaiming_bound(self):
        w = kaiming_uniform(make_rng(0), 96, 256)
        bound = np.sqrt(6.0 / 96)
        assert w.shape == (96, 256)
        assert w.min() >= -bound and w.max() <= bound
        assert abs(w.mean()) < 0.01

    def test_architecture_parameter_count(self):
        # 63->256, 256->256 x3, (256+63)->256, 256->256 x3, heads
        mlp = NerfMlp(MlpConfig(), make_rng(0))
        expect = 0
        expect += 63 * 256 + 256                   # trunk0
        expect += 3 * (256 * 256 + 256)            # trunk1-3
        expect += (256 + 63) * 256 + 256           # trunk4 (skip)
        expect += 3 * (256 * 256 + 256)            # trunk5-7
        expect += 256 * 1 + 1                      # sigma head
        expect += 256 * 256 + 256                  # feature layer
        expect += (256 + 27) * 128 + 128           # color hidden
        expect += 128 * 3 + 3                      # color out
        assert mlp.parameter_count() == expect

    def test_conditioning_widens_input(self):
        mlp = NerfMlp(MlpConfig(conditioning_dim=256), make_rng(0))
        assert mlp.params["trunk0.w"].shape == (63 + 256, 256)
        assert mlp.params["trunk4.w"].shape == (256 + 63 + 256, 256)

    def test_seeded_init_reproducible(self):
        a = NerfMlp(MlpConfig(), make_rng(3))
        b = NerfMlp(MlpConfig(), make_rng(3))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def encode_batch(mlp, points, dirs):
    enc = mlp.config.encoding
    return (positional_encoding(points, enc.l_pos, enc.include_input),
            positional_encoding(dirs, enc.l_dir, enc.include_input))


class TestForward:
    def test_output_shapes_and_ranges(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=32, skip_layer=1,
                                color_hidden=16), make_rng(0))
        pts = make_rng(1).normal(size=(5, 3)).astype(np.float32)
        dirs = np.tile([0.0, 0.0, -1.0], (5, 1)).astype(np.float32)
        rgb, sigma = mlp.forward(*encode_batch(mlp, pts, dirs))
        assert rgb.shape == (5, 3)
        assert sigma.shape == (5, 1)
        assert np.all((rgb.data > 0) & (rgb.data < 1))
        assert np.all(sigma.data >= 0)

    def test_zeroed_heads_give_gray_and_zero_density(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=16, skip_layer=1,
                                color_hidden=8), make_rng(0))
        for name in ("sigma.w", "sigma.b", "color2.w", "color2.b"):
            mlp.params[name].data[...] = 0.0
        pts = make_rng(1).normal(size=(4, 3)).astype(np.float32)
        rgb, sigma = mlp.forward(*encode_batch(mlp, pts, pts))
        np.testing.assert_allclose(rgb.data, 0.5, atol=1e-7)
        np.testing.assert_allclose(sigma.data, 0.0, atol=1e-7)

    def test_density_ignores_direction(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=32, skip_layer=1,
                                color_hidden=16), make_rng(2))
        pts = make_rng(3).normal(size=(6, 3)).astype(np.float32)
        d1 = np.tile([0.0, 0.0, -1.0], (6, 1))
        d2 = np.tile([1.0, 0.0, 0.0], (6, 1))
        _, s1 = mlp.forward(*encode_batch(mlp, pts, d1))
        _, s2 = mlp.forward(*encode_batch(mlp, pts, d2))
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_color_depends_on_direction(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=32, skip_layer=1,
                                color_hidden=16), make_rng(2))
        pts = make_rng(3).normal(size=(6, 3)).astype(np.float32)
        c1, _ = mlp.forward(*encode_batch(mlp, pts, np.tile([0.0, 0.0, -1.0], (6, 1))))
        c2, _ = mlp.forward(*encode_batch(mlp, pts, np.tile([1.0, 0.0, 0.0], (6, 1))))
        assert np.abs(c1.data - c2.data).max() > 1e-5

    def test_conditioning_required_when_configured(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=16, skip_layer=1,
                                color_hidden=8, conditioning_dim=8), make_rng(0))
        pts = np.zeros((2, 3), np.float32)
        enc_x, enc_d = encode_batch(mlp, pts, pts)
        with pytest.raises(ValueError, match="conditioning"):
            mlp.forward(enc_x, enc_d)
        with pytest.raises(ValueError, match="conditioning dim"):
            mlp.forward(enc_x, enc_d, cond=Tensor(np.zeros((2, 4), np.float32)))
        rgb, _ = mlp.forward(enc_x, enc_d, cond=Tensor(np.zeros((2, 8), np.float32)))
        assert rgb.shape == (2, 3)

    def test_baseline_rejects_conditioning(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=16, skip_layer=1,
                                color_hidden=8), make_rng(0))
        pts = np.zeros((2, 3), np.float32)
        enc_x, enc_d = encode_batch(mlp, pts, pts)
        with pytest.raises(ValueError, match="baseline"):
            mlp.forward(enc_x, enc_d, cond=Tensor(np.zeros((2, 8), np.float32)))

    def test_train_mode_needs_rng(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=16, skip_layer=1,
                                color_hidden=8, dropout=0.2), make_rng(0))
        pts = np.zeros((2, 3), np.float32)
        enc_x, enc_d = encode_batch(mlp, pts, pts)
        with pytest.raises(ValueError, match="rng"):
            mlp.forward(enc_x, enc_d, train=True)

    def test_gradients_flow_to_all_parameters(self):
        mlp = NerfMlp(MlpConfig(depth=3, width=16, skip_layer=1,
                                color_hidden=8, dropout=0.0), make_rng(1))
        pts = make_rng(2).normal(size=(4, 3)).astype(np.float32)
        rgb, sigma = mlp.forward(*encode_batch(mlp, pts, pts))
        loss = ad.add(ad.reduce_mean(rgb), ad.reduce_mean(sigma))
        grads = ad.grads_of(loss, mlp.params)
        for name, g in grads.items():
            assert np.any(g != 0.0), f"no gradient reached {name}"

    def test_gradcheck_small_mlp(self):
        mlp = NerfMlp(MlpConfig(depth=2, width=8, skip_layer=1,
                                color_hidden=4, dropout=0.0,
                                encoding=EncodingConfig(l_pos=2, l_dir=1)),
                      make_rng(0))
        pts = make_rng(1).normal(size=(3, 3)).astype(np.float32)
        enc_x, enc_d = encode_batch(mlp, pts, pts)
        w0 = mlp.params["trunk0.w"]
        c2 = mlp.params["color2.w"]

        def scalar(w, c):
            mlp.params["trunk0.w"] = w
            mlp.params["color2.w"] = c
            rgb, sigma = mlp.forward(enc_x, enc_d)
            return ad.add(ad.reduce_mean(rgb), ad.reduce_mean(sigma))

        err = grad_check(scalar, [w0, c2], eps=1e-3)
        assert err < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(-2.0, 2.0))
def test_encoding_values_bounded(l, x):
    out = positional_encoding(np.array([x], np.float32), l,
                              include_input=False)
    assert out.shape == (2 * l,)
    assert np.all(np.abs(out) <= 1.0 + 1e-6)
