import numpy as np
import pytest

from fewnerf.imageops import downsample_average, resize_bilinear


class TestResizeBilinear:
    def test_identity_resize(self):
        img = np.random.default_rng(0).random((6, 5, 3))
        out = resize_bilinear(img, 6, 5)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_constant_image_stays_constant(self):
        img = np.full((4, 4, 3), 0.7)
        out = resize_bilinear(img, 9, 13)
        np.testing.assert_allclose(out, 0.7, atol=1e-6)
        assert out.shape == (9, 13, 3)

    def test_two_by_two_upsample_center(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = resize_bilinear(img, 2, 4)
        # columns at x=-0.25, 0.25, 0.75, 1.25 clamp to [0, 1] sample range
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)

    def test_preserves_value_range(self):
        img = np.random.default_rng(1).random((8, 8))
        out = resize_bilinear(img, 19, 3)
        assert out.min() >= img.min() - 1e-6
        assert out.max() <= img.max() + 1e-6

    def test_2d_input_returns_2d(self):
        out = resize_bilinear(np.zeros((4, 4)), 2, 2)
        assert out.shape == (2, 2)


class TestDownsampleAverage:
    def test_exact_block_means(self):
        img = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = downsample_average(img, 2)
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]], atol=1e-6)

    def test_energy_preserved(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        out = downsample_average(img, 4)
        assert out.shape == (2, 2, 3)
        np.testing.assert_allclose(out.mean(), img.mean(), atol=1e-6)

    def test_indivisible_factor_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            downsample_average(np.zeros((6, 6)), 4)
