"""Layer primitives against independent oracles and finite differences."""

import numpy as np
import pytest

from vsrgrid import tensor as tz


def conv2d_naive(x, w, b=None):
    """Direct summation oracle, quadruple loop, zero same-padding."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, k, h, wd))
    for ni in range(n):
        for ki in range(k):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0 if b is None else b[ki]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i + u - ph, j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[ni, ci, ii, jj] * w[ki, ci, u, v]
                    out[ni, ki, i, j] = acc
    return out


def central_diff(f, arr, idx, eps=1e-5):
    orig = arr[idx]
    arr[idx] = orig + eps
    plus = f()
    arr[idx] = orig - eps
    minus = f()
    arr[idx] = orig
    return (plus - minus) / (2 * eps)


class TestConvForward:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 6, 6))
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        y = tz.conv2d_forward(x, w, np.zeros(3))
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_zero_weights_give_bias(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
        w = np.zeros((5, 2, 3, 3))
        b = np.arange(5.0)
        y = tz.conv2d_forward(x, w, b)
        for ki in range(5):
            np.testing.assert_allclose(y[0, ki], b[ki])

    @pytest.mark.parametrize("c,k", [(3, 4), (16, 3), (64, 16), (4, 4), (2, 9)])
    def test_against_naive_oracle(self, c, k):
        rng = np.random.default_rng(c * 100 + k)
        x = rng.standard_normal((2, c, 5, 5))
        w = rng.standard_normal((k, c, 3, 3))
        b = rng.standard_normal(k)
        np.testing.assert_allclose(tz.conv2d_forward(x, w, b),
                                   conv2d_naive(x, w, b), atol=1e-10)

    def test_5x5_kernel(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 2, 7, 6))
        w = rng.standard_normal((3, 2, 5, 5))
        np.testing.assert_allclose(tz.conv2d_forward(x, w),
                                   conv2d_naive(x, w), atol=1e-10)

    def test_rejects_even_kernel(self):
        with pytest.raises(tz.ShapeError):
            tz.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(tz.ShapeError):
            tz.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 3, 3)))


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 4, 4))
        w = rng.standard_normal((2, 3, 3, 3))
        gi, gw, gb = tz.conv2d_backward(x, w, np.zeros((1, 2, 4, 4)))
        assert not gi.any() and not gw.any() and not gb.any()

    def test_bias_grad_is_channel_sum(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        g = rng.standard_normal((2, 4, 5, 5))
        _, _, gb = tz.conv2d_backward(x, w, g)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)

    @pytest.mark.parametrize("c,k", [(3, 4), (16, 3), (64, 16), (5, 5)])
    def test_matches_finite_differences(self, c, k):
        rng = np.random.default_rng(c * 7 + k)
        x = rng.standard_normal((2, c, 5, 4))
        w = rng.standard_normal((k, c, 3, 3))
        b = rng.standard_normal(k)
        g = rng.standard_normal((2, k, 5, 4))
        gi, gw, gb = tz.conv2d_backward(x, w, g)

        def objective():
            return float((g * tz.conv2d_forward(x, w, b)).sum())

        for arr, grad in ((x, gi), (w, gw), (b, gb)):
            for _ in range(4):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                fd = central_diff(objective, arr, idx)
                denom = max(abs(fd), abs(grad[idx]), 1e-8)
                assert abs(fd - grad[idx]) / denom < 1e-4

    def test_need_input_grad_false(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 3, 4, 4))
        w = rng.standard_normal((2, 3, 3, 3))
        gi, gw, gb = tz.conv2d_backward(x, w, rng.standard_normal((1, 2, 4, 4)),
                                        need_input_grad=False)
        assert gi is None and gw.shape == w.shape

    def test_rejects_wrong_grad_shape(self):
        with pytest.raises(tz.ShapeError):
            tz.conv2d_backward(np.zeros((1, 3, 4, 4)), np.zeros((2, 3, 3, 3)),
                               np.zeros((1, 2, 5, 5)))


class TestPixelShuffle:
    def test_constant_stays_constant(self):
        x = np.full((1, 8, 3, 3), 2.5)
        assert (tz.pixel_shuffle(x, 2) == 2.5).all()

    def test_r1_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(tz.pixel_shuffle(x, 1), x)

    def test_index_formula_oracle(self):
        # out[n, c, i*r+u, j*r+v] == in[n, c*r*r + u*r + v, i, j]
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 2, 2))
        y = tz.pixel_shuffle(x, 2)
        assert y.shape == (1, 1, 4, 4)
        for i in range(2):
            for j in range(2):
                for u in range(2):
                    for v in range(2):
                        assert y[0, 0, i * 2 + u, j * 2 + v] == x[0, u * 2 + v, i, j]

    def test_round_trips_both_ways(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 12, 3, 5))
        np.testing.assert_array_equal(
            tz.pixel_shuffle_backward(tz.pixel_shuffle(x, 2), 2), x)
        y = rng.standard_normal((2, 3, 6, 10))
        np.testing.assert_array_equal(
            tz.pixel_shuffle(tz.pixel_shuffle_backward(y, 2), 2), y)

    def test_rejects_indivisible_channels(self):
        with pytest.raises(tz.ShapeError):
            tz.pixel_shuffle(np.zeros((1, 3, 4, 4)), 2)


class TestLeakyRelu:
    def test_nonnegative_unchanged(self):
        x = np.abs(np.random.default_rng(0).standard_normal((3, 4)))
        np.testing.assert_array_equal(tz.leaky_relu(x, 0.1), x)

    def test_zero_slope_clamps(self):
        x = -np.abs(np.random.default_rng(1).standard_normal((3, 4))) - 0.1
        assert (tz.leaky_relu(x, 0.0) == 0).all()

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        # keep probes away from the kink at zero
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 0.05] = 0.1
        g = rng.standard_normal((4, 5))
        out = tz.leaky_relu(x, 0.2)
        gx = tz.leaky_relu_backward(out, 0.2, g)

        def objective():
            return float((g * tz.leaky_relu(x, 0.2)).sum())

        for _ in range(6):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            fd = central_diff(objective, x, idx)
            assert abs(fd - gx[idx]) < 1e-7

    def test_rejects_slope_out_of_range(self):
        with pytest.raises(tz.ShapeError):
            tz.leaky_relu(np.zeros(3), 1.0)


class TestElementwise:
    def test_add_zero(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(tz.add(x, np.zeros_like(x)), x)

    def test_add_rejects_mismatch(self):
        with pytest.raises(tz.ShapeError):
            tz.add(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_concat_then_split_recovers(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 5, 4, 4))
        merged = tz.concat_channels(a, b)
        a2, b2 = tz.split_channels(merged, 3)
        np.testing.assert_array_equal(a2, a)
        np.testing.assert_array_equal(b2, b)

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(tz.ShapeError):
            tz.concat_channels(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 5, 4)))


class TestNearestUpsample:
    def test_blocks_are_constant(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 3, 3))
        y = tz.nearest_upsample(x, 4)
        assert y.shape == (1, 2, 12, 12)
        for i in range(3):
            for j in range(3):
                block = y[:, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
                assert (block == x[:, :, i:i + 1, j:j + 1]).all()

    def test_backward_sums_blocks(self):
        rng = np.random.default_rng(1)
        g = rng.standard_normal((1, 2, 8, 8))
        gx = tz.nearest_upsample_backward(g, 4)
        expected = g.reshape(1, 2, 2, 4, 2, 4).sum(axis=(3, 5))
        np.testing.assert_allclose(gx, expected, rtol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 3, 3))
        g = rng.standard_normal((1, 1, 12, 12))
        gx = tz.nearest_upsample_backward(g, 4)

        def objective():
            return float((g * tz.nearest_upsample(x, 4)).sum())

        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            fd = central_diff(objective, x, idx)
            assert abs(fd - gx[idx]) < 1e-7


class TestDeterminism:
    def test_conv_bit_identical(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 8, 6, 6)).astype(np.float32)
        w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
        b = rng.standard_normal(8).astype(np.float32)
        y1 = tz.conv2d_forward(x, w, b)
        y2 = tz.conv2d_forward(x.copy(), w.copy(), b.copy())
        assert np.array_equal(y1, y2)


class TestRawTensorFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(3,), (2, 4), (2, 3, 4, 5)]:
            arr = rng.standard_normal(shape)
            path = tmp_path / "t.bin"
            tz.save_tensor(path, arr)
            back = tz.load_tensor(path)
            np.testing.assert_array_equal(back, arr)
            assert back.dtype == np.float64

    def test_header_layout(self, tmp_path):
        import struct
        path = tmp_path / "t.bin"
        tz.save_tensor(path, np.arange(6.0).reshape(2, 3))
        raw = path.read_bytes()
        rank = struct.unpack("<q", raw[:8])[0]
        dims = struct.unpack("<2q", raw[8:24])
        assert (rank, dims) == (2, (2, 3))
        payload = np.frombuffer(raw[24:], dtype="<f8")
        np.testing.assert_array_equal(payload, np.arange(6.0))

    def test_float32_saved_as_double(self, tmp_path):
        path = tmp_path / "t.bin"
        tz.save_tensor(path, np.ones(4, dtype=np.float32))
        assert path.stat().st_size == 8 + 8 + 4 * 8


def test_assert_finite():
    tz.assert_finite(np.ones(3))
    with pytest.raises(tz.NonFiniteError):
        tz.assert_finite(np.array([1.0, np.nan]))
    with pytest.raises(tz.NonFiniteError):
        tz.assert_finite(np.array([np.inf]))
