"""Primitive forward values, backward rules, and tape semantics."""

import numpy as np
import pytest

from s2sp import ops
from s2sp.tensor import RngStream, Tape, Tensor, backward


def fd_gradient(loss_fn, tensor, h=1e-5):
    """Independent central-difference gradient of loss_fn wrt tensor.data."""
    flat = tensor.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn().item()
        flat[i] = orig - h
        minus = loss_fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return out.reshape(tensor.data.shape)


def tape_gradient(loss_fn, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return [t.grad for t in tensors]


def conv2d_reference(x, w, b, pad):
    """Direct-summation oracle over the reflect-padded array."""
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.zeros((cout, h, wd))
    for co in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = b[co]
                for ci in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[co, ci, di, dj] * xp[ci, i + di, j + dj]
                out[co, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).random((1, 4, 4)), dtype=np.float64)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ops.conv2d(x, Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-12)

    def test_reflect_padded_window_sum(self):
        # all-ones 3x3 kernel on [[1,2],[3,4]]: out[0,0] is the reflected window sum
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = ops.conv2d(Tensor(x, dtype=np.float64),
                         Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
        expected00 = padded[0, 0:3, 0:3].sum()
        assert expected00 == 27.0  # frozen from the oracle
        assert out.data[0, 0, 0] == pytest.approx(expected00)
        np.testing.assert_allclose(out.data, conv2d_reference(x, np.ones((1, 1, 3, 3)), np.zeros(1), 1))

    def test_matches_reference_on_random_instance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 5, 6))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, 1), rtol=1e-10)

    def test_weight_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 5, 5)), dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True, dtype=np.float64)
        b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)

        def loss():
            return ops.conv2d(x, w, b).sum()

        (grad,) = tape_gradient(loss, [w])
        fd = fd_gradient(loss, w)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)

    def test_rejects_even_kernel_and_shape_mismatch(self):
        x = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(ValueError, match="odd"):
            ops.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError, match="pad"):
            ops.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), pad=2)

    def test_preserves_shape_for_every_odd_kernel(self):
        rng = np.random.default_rng(5)
        for k in (1, 3, 5, 7):
            x = Tensor(rng.random((2, 8, 9)))
            w = Tensor(rng.random((3, 2, k, k)))
            out = ops.conv2d(x, w, Tensor(np.zeros(3)))
            assert out.shape == (3, 8, 9)


class TestActivations:
    def test_leaky_relu_values(self):
        x = Tensor(np.array([2.0, -1.0, 0.0]).reshape(1, 1, 3), dtype=np.float64)
        out = ops.leaky_relu(x, 0.2)
        np.testing.assert_allclose(out.data.reshape(-1), [2.0, -0.2, 0.0])

    def test_leaky_relu_backward_multiplier_at_zero_is_slope(self):
        x = Tensor(np.zeros((1, 1, 1)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ops.leaky_relu(x, 0.2).sum()
        backward(loss, tape)
        assert x.grad.reshape(()) == pytest.approx(0.2)

    def test_sigmoid_values_and_saturation(self):
        x = Tensor(np.array([0.0, 40.0, -40.0], dtype=np.float32).reshape(1, 1, 3))
        out = ops.sigmoid(x).data.reshape(-1)
        assert out[0] == pytest.approx(0.5)
        assert out[1] == np.float32(1.0)  # saturates cleanly, no overflow
        assert 0.0 < out[2] < 1e-15
        assert np.all(np.isfinite(out))

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(np.zeros((1, 1, 1)), requires_grad=True, dtype=np.float64)

        def loss():
            return ops.sigmoid(x).sum()

        (grad,) = tape_gradient(loss, [x])
        assert grad.reshape(()) == pytest.approx(0.25)
        fd = fd_gradient(loss, x)
        np.testing.assert_allclose(grad, fd, rtol=1e-6)


class TestPoolingAndResampling:
    def test_max_pool_basic(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert ops.max_pool2(x).data.tolist() == [[[4.0]]]

    def test_max_pool_ramp(self):
        # 4x4 row-major ramp 0..15: hand-enumerated 2x2 window maxima
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
        np.testing.assert_array_equal(ops.max_pool2(x).data[0], [[5.0, 7.0], [13.0, 15.0]])

    def test_max_pool_tie_gradient_goes_to_first_element(self):
        x = Tensor(np.ones((1, 2, 2)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ops.max_pool2(x).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])

    def test_max_pool_rejects_odd_dims(self):
        with pytest.raises(ValueError, match="even"):
            ops.max_pool2(Tensor(np.zeros((1, 3, 4))))

    def test_upsample_replicates_blocks(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(ops.upsample_nearest2(x).data[0], expected)

    def test_upsample_gradient_is_replication_count(self):
        x = Tensor(np.random.default_rng(0).random((2, 3, 3)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ops.upsample_nearest2(x).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full((2, 3, 3), 4.0))

    def test_upsample_of_pool_is_not_identity(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
        round_trip = ops.upsample_nearest2(ops.max_pool2(x))
        assert not np.array_equal(round_trip.data, x.data)


class TestConcat:
    def test_channel_order_preserved(self):
        a = Tensor(np.full((1, 2, 2), 1.0))
        b = Tensor(np.stack([np.full((2, 2), 2.0), np.full((2, 2), 3.0)]))
        out = ops.concat_channels(a, b)
        assert out.shape == (3, 2, 2)
        np.testing.assert_array_equal(out.data[:, 0, 0], [1.0, 2.0, 3.0])

    def test_concat_with_empty_is_identity(self):
        a = Tensor(np.random.default_rng(1).random((2, 3, 3)))
        out = ops.concat_channels(a, Tensor(np.zeros((0, 3, 3))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_backward_splits_gradient(self):
        a = Tensor(np.zeros((1, 2, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.zeros((2, 2, 2)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ops.concat_channels(a, b).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2, 2)))

    def test_rejects_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            ops.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2))))


class TestDropout:
    def test_p_zero_is_identity(self):
        x = Tensor(np.random.default_rng(0).random((2, 4, 4)))
        out = ops.dropout(x, 0.0, RngStream(1).generator(), active=True)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inactive_is_identity_regardless_of_p(self):
        x = Tensor(np.random.default_rng(0).random((2, 4, 4)))
        out = ops.dropout(x, 0.9, RngStream(1).generator(), active=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inverted_scaling_preserves_mean(self):
        # Monte Carlo: 1e6 ones at p=0.5, empirical mean within [0.99, 1.01]
        x = Tensor(np.ones((1, 1000, 1000), dtype=np.float32))
        out = ops.dropout(x, 0.5, RngStream(42, 7).generator(), active=True)
        assert 0.99 <= float(out.data.mean()) <= 1.01

    def test_rejects_p_one(self):
        with pytest.raises(ValueError, match="p must be"):
            ops.dropout(Tensor(np.zeros((1, 2, 2))), 1.0, RngStream(0).generator())

    def test_fixed_generator_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True, dtype=np.float64)
        stream = RngStream(3, 1)
        weights = rng.standard_normal((2, 4, 4))

        def loss():
            return (ops.dropout(x, 0.4, stream.generator(5), active=True) * weights).sum()

        (grad,) = tape_gradient(loss, [x])
        fd = fd_gradient(loss, x)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).random((2, 2)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = x.sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_half_square_norm_gradient_is_x(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = (x * x).sum() * 0.5
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [1.0, -2.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = x.sum()
        backward(loss, tape)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)

    def test_off_tape_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            x.sum()
        stray = (x * 1.0).sum()  # built outside the tape context
        with pytest.raises(ValueError, match="tape"):
            backward(stray, tape)

    def test_no_recording_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        y = x.sum()
        assert len(tape) == 0
        assert not tape.contains(y)

    def test_finite_check_flags_nan(self, finite_checks):
        x = Tensor(np.array([1.0, np.inf]))
        with pytest.raises(FloatingPointError):
            x * 2.0


class TestSmoothAbs:
    def test_exact_abs_with_zero_subgradient(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = x.smooth_abs().sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])

    def test_smoothed_value_is_zero_at_zero(self):
        x = Tensor(np.zeros(4))
        assert ops.spatial_diff is not None  # module sanity
        assert float(x.smooth_abs(1e-3).sum().item()) == pytest.approx(0.0, abs=1e-12)


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(123, 4).generator(9).random(8)
        b = RngStream(123, 4).generator(9).random(8)
        np.testing.assert_array_equal(a, b)

    def test_different_streams_and_blocks_differ(self):
        base = RngStream(123, 4).generator(9).random(8)
        assert not np.array_equal(base, RngStream(123, 5).generator(9).random(8))
        assert not np.array_equal(base, RngStream(123, 4).generator(10).random(8))
        assert not np.array_equal(base, RngStream(124, 4).generator(9).random(8))

    def test_rejects_negative_ids(self):
        with pytest.raises(ValueError):
            RngStream(-1)
