"""Noise synthesis and full-reference metric behavior."""

import math

import numpy as np
import pytest

from s2sp.quality import (MetricReport, NoiseSpec, add_awgn, evaluate,
                          gaussian_lpf, psnr, ssim)


def mse_reference(a, b):
    """Brute-force direct-summation MSE oracle."""
    total = 0.0
    fa, fb = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    for x, y in zip(fa, fb):
        total += (x - y) ** 2
    return total / fa.size


class TestAddAwgn:
    def test_sigma_zero_is_identity(self):
        x = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
        np.testing.assert_array_equal(add_awgn(x, NoiseSpec(0.0, seed=3)), x)

    def test_noise_is_zero_mean(self):
        x = np.full((400, 400, 1), 0.5, dtype=np.float32)
        noise = add_awgn(x, NoiseSpec(25.0, seed=1)) - x
        se = (25.0 / 255.0) / math.sqrt(noise.size)
        assert abs(noise.mean()) < 3 * se

    def test_psnr_calibration_at_sigma_25(self):
        x = np.full((128, 128, 1), 0.5, dtype=np.float32)
        y = add_awgn(x, NoiseSpec(25.0, seed=7))
        expected = 20.0 * math.log10(255.0 / 25.0)  # 20.17 dB
        assert psnr(y, x) == pytest.approx(expected, abs=0.3)

    def test_unclamped_output(self):
        x = np.zeros((64, 64, 1), dtype=np.float32)
        y = add_awgn(x, NoiseSpec(50.0, seed=2))
        assert y.min() < 0.0  # deliberately not clipped

    def test_deterministic_per_seed(self):
        x = np.full((16, 16, 1), 0.5, dtype=np.float32)
        np.testing.assert_array_equal(add_awgn(x, NoiseSpec(10.0, seed=4)),
                                      add_awgn(x, NoiseSpec(10.0, seed=4)))

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            NoiseSpec(-1.0)


class TestPsnr:
    def test_identical_images_hit_cap(self):
        x = np.random.default_rng(0).random((16, 16))
        assert psnr(x, x) == 99.0

    def test_constant_difference_of_point_one(self):
        a = np.full((10, 10), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_brute_force_mse_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((12, 13)), rng.random((12, 13))
        expected = 10.0 * math.log10(1.0 / mse_reference(a, b))
        assert psnr(a, b) == pytest.approx(expected, abs=1e-9)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_reflexive(self):
        x = np.random.default_rng(0).random((24, 24))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_image_scores_below_one(self):
        x = np.random.default_rng(1).random((24, 24))
        assert ssim(x, 1.0 - x) < 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_independent_reference_implementation(self):
        structural_similarity = pytest.importorskip("skimage.metrics").structural_similarity
        rng = np.random.default_rng(3)
        a = rng.random((40, 52))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = structural_similarity(a, b, win_size=11, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-12)

    def test_color_images_average_channels(self):
        rng = np.random.default_rng(4)
        a = rng.random((16, 16, 3))
        per_channel = [ssim(a[:, :, c], a[:, :, c] * 0.8 + 0.1) for c in range(3)]
        assert ssim(a, a * 0.8 + 0.1) == pytest.approx(np.mean(per_channel), abs=1e-12)

    def test_rejects_images_smaller_than_window(self):
        with pytest.raises(ValueError, match="at least"):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))


class TestGaussianLpf:
    def test_constant_image_unchanged(self):
        x = np.full((20, 20), 0.37, dtype=np.float32)
        np.testing.assert_allclose(gaussian_lpf(x, 1.0), x, atol=1e-6)

    def test_impulse_recovers_kernel(self):
        x = np.zeros((21, 21), dtype=np.float32)
        x[10, 10] = 1.0
        out = gaussian_lpf(x, 1.0)
        t = np.arange(-3, 4, dtype=np.float64)
        k = np.exp(-0.5 * t ** 2)
        k /= k.sum()
        # separable response: the center row/column carry k scaled by k[3]
        np.testing.assert_allclose(out[10, 7:14], k * k[3], atol=1e-6)
        np.testing.assert_allclose(out[7:14, 10], k * k[3], atol=1e-6)
        assert out.sum() == pytest.approx(1.0, abs=1e-6)  # kernel normalized

    def test_preserves_mean(self):
        x = np.random.default_rng(6).random((33, 41)).astype(np.float32)
        assert gaussian_lpf(x, 1.5).mean() == pytest.approx(x.mean(), abs=1e-6)

    def test_improves_psnr_on_awgn(self):
        rng = np.random.default_rng(7)
        t = np.linspace(0, 1, 64)
        clean = (0.3 + 0.4 * np.outer(np.sin(3 * t * np.pi) * 0.5 + 0.5, t)).astype(np.float32)
        noisy = add_awgn(clean[:, :, None], NoiseSpec(25.0, seed=8))[:, :, 0]
        assert psnr(gaussian_lpf(noisy, 1.0), clean) > psnr(noisy, clean)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError, match="sigma_blur"):
            gaussian_lpf(np.zeros((8, 8)), 0.0)


class TestMetricReport:
    def test_text_and_record_formats(self):
        report = MetricReport(psnr_db=24.5, ssim=0.91)
        assert report.as_text() == "PSNR=24.5000 dB SSIM=0.910000"
        assert report.as_record() == "psnr_db=24.500000 ssim=0.91000000"

    def test_evaluate_self_is_perfect(self):
        x = np.random.default_rng(0).random((16, 16))
        report = evaluate(x, x)
        assert report.psnr_db == 99.0
        assert report.ssim == pytest.approx(1.0, abs=1e-9)
