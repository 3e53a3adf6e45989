"""PSNR/SSIM against direct-formula oracles and sanity properties."""

import math

import numpy as np
import pytest

from vsrgrid import metrics as mx
from vsrgrid.tensor import ShapeError


def psnr_scalar_oracle(a, b, max_val=1.0):
    """Direct per-frame loop, python floats only."""
    vals = []
    for fa, fb in zip(a, b):
        se, count = 0.0, 0
        for x, y in zip(fa.ravel().tolist(), fb.ravel().tolist()):
            se += (x - y) ** 2
            count += 1
        mse = se / count
        vals.append(99.0 if mse == 0 else min(99.0, 10 * math.log10(max_val ** 2 / mse)))
    return sum(vals) / len(vals)


class TestPsnr:
    def test_identical_inputs_capped(self):
        x = np.random.default_rng(0).random((2, 3, 8, 8))
        assert mx.psnr(x, x) == 99.0

    def test_constant_difference(self):
        a = np.zeros((1, 3, 8, 8))
        b = np.full((1, 3, 8, 8), 0.1)
        assert mx.psnr(a, b, max_val=1.0) == pytest.approx(20.0, abs=1e-9)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((3, 3, 6, 6))
        b = rng.random((3, 3, 6, 6))
        assert mx.psnr(a, b) == pytest.approx(psnr_scalar_oracle(a, b), abs=1e-10)

    def test_monotone_under_noise(self):
        rng = np.random.default_rng(2)
        base = rng.random((2, 3, 16, 16))
        values = []
        for amp in np.linspace(0.01, 0.3, 10):
            noisy = base + amp * rng.standard_normal(base.shape)
            values.append(mx.psnr(base, noisy))
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mx.psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))

    def test_luma_mode(self):
        rng = np.random.default_rng(3)
        a = rng.random((2, 3, 8, 8))
        b = rng.random((2, 3, 8, 8))
        weights = np.array([0.299, 0.587, 0.114])
        ya = np.tensordot(a, weights, axes=([1], [0]))[:, None]
        yb = np.tensordot(b, weights, axes=([1], [0]))[:, None]
        assert mx.psnr(a, b, luma=True) == pytest.approx(mx.psnr(ya, yb), abs=1e-10)


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(0).random((2, 3, 16, 16))
        assert mx.ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.random((1, 3, 12, 12))
        b = rng.random((1, 3, 12, 12))
        assert mx.ssim(a, b) == pytest.approx(mx.ssim(b, a), abs=1e-12)

    def test_anticorrelated_binary_contrast(self):
        # x and 1-x have perfectly anti-correlated structure
        rng = np.random.default_rng(2)
        x = (rng.random((1, 3, 16, 16)) > 0.5).astype(np.float64)
        assert mx.ssim(x, 1.0 - x) < 0.1

    def test_monotone_under_noise(self):
        rng = np.random.default_rng(3)
        base = rng.random((1, 3, 16, 16))
        values = []
        for amp in np.linspace(0.02, 0.5, 10):
            noisy = base + amp * rng.standard_normal(base.shape)
            values.append(mx.ssim(base, noisy))
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_rejects_frames_below_window(self):
        with pytest.raises(ShapeError):
            mx.ssim(np.zeros((1, 3, 10, 16)), np.zeros((1, 3, 10, 16)))

    def test_bounded_by_one(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = rng.random((1, 3, 12, 12))
            b = rng.random((1, 3, 12, 12))
            assert mx.ssim(a, b) <= 1.0


class TestGaussianWindow:
    def test_kernel_normalized_and_symmetric(self):
        k = mx._gaussian_kernel()
        assert k.shape == (11, 11)
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(k, k.T)
        np.testing.assert_allclose(k, k[::-1, ::-1])

    def test_sigma_value(self):
        k = mx._gaussian_kernel()
        # ratio of adjacent center weights follows exp(-(1)/(2*1.5^2))
        expected = math.exp(-1.0 / (2 * 1.5 ** 2))
        assert k[5, 6] / k[5, 5] == pytest.approx(expected, rel=1e-12)

    def test_separable_pass_matches_direct_window_oracle(self):
        # direct oracle: dot every 11x11 window with the 2-d kernel
        rng = np.random.default_rng(7)
        x = rng.random((1, 2, 14, 13))
        got = mx._window_mean(x)
        k = mx._gaussian_kernel()
        for c in range(2):
            for i in range(14 - 10):
                for j in range(13 - 10):
                    ref = float((x[0, c, i:i + 11, j:j + 11] * k).sum())
                    assert got[0, c, i, j] == pytest.approx(ref, abs=1e-12)


def test_evaluate_report():
    rng = np.random.default_rng(5)
    a = rng.random((4, 3, 16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    rep = mx.evaluate(a, b)
    assert rep.frame_count == 4
    assert 0 < rep.ssim <= 1
    assert rep.psnr_db == pytest.approx(mx.psnr(a, b))


def test_clip_input_shapes():
    rng = np.random.default_rng(6)
    clip = rng.random((2, 2, 3, 16, 16))  # T,N,C,H,W
    flat = clip.reshape(-1, 3, 16, 16)
    assert mx.psnr(clip, clip * 0.9) == pytest.approx(mx.psnr(flat, flat * 0.9))
